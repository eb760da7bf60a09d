"""Frozen CLIP/BLIP wrappers producing per-item embedding rows.

Two load paths: pretrained weights from the hub cache, or architecture-only
random initialization (seeded, deterministic) for offline smoke runs. The
random path also swaps the hub tokenizer for a hash-based one so no network
or cached vocabulary is needed.
"""
import hashlib

import numpy as np
import torch
from PIL import Image

# the normalization CLIP was trained with; BLIP uses the same statistics
IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)

MODEL_NAMES = ("clip-vitb32", "blip-vitb")
_HUB_IDS = {
    "clip-vitb32": "openai/clip-vit-base-patch32",
    "blip-vitb": "Salesforce/blip-itm-base-coco",
}
CONTEXT_LENGTH = 64


def preprocess_image(path, size: int) -> np.ndarray:
    """Decode, resize to size x size, scale to [0,1], normalize: (3,H,W) f32."""
    with Image.open(path) as im:
        rgb = im.convert("RGB").resize((size, size), Image.BICUBIC)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return ((arr - IMAGE_MEAN) / IMAGE_STD).transpose(2, 0, 1)


class HashTokenizer:
    """Deterministic whitespace tokenizer: md5(token) hashed into the vocab.

    Special positions follow the host model's conventions (bos first, eos
    last for CLIP-style pooling; pad after) so feature pooling stays sane.
    """

    def __init__(self, vocab_size: int, bos_id, eos_id, pad_id):
        self.vocab_size = vocab_size
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.pad_id = pad_id if pad_id is not None else 0

    def _token_id(self, token: str) -> int:
        digest = hashlib.md5(token.encode("utf-8")).digest()
        word = int.from_bytes(digest[:8], "little")
        # keep clear of the special ids at the top/bottom of the vocab
        return 3 + word % (self.vocab_size - 3 - 2)

    def __call__(self, texts):
        rows, masks = [], []
        for text in texts:
            ids = [self._token_id(t) for t in text.split()][: CONTEXT_LENGTH - 2]
            if self.bos_id is not None:
                ids = [self.bos_id] + ids
            if self.eos_id is not None:
                ids = ids + [self.eos_id]
            mask = [1] * len(ids) + [0] * (CONTEXT_LENGTH - len(ids))
            ids = ids + [self.pad_id] * (CONTEXT_LENGTH - len(ids))
            rows.append(ids)
            masks.append(mask)
        return (torch.tensor(rows, dtype=torch.long),
                torch.tensor(masks, dtype=torch.long))


def _features(out) -> torch.Tensor:
    # transformers < 5 returns the projected tensor; >= 5 returns the full
    # ModelOutput with the projection written into pooler_output
    return out if torch.is_tensor(out) else out.pooler_output


class Encoder:
    def __init__(self, model, tokenize, image_size: int, dim: int, device: str):
        self.model = model
        self.tokenize = tokenize
        self.image_size = image_size
        self.dim = dim
        self.device = device

    @torch.no_grad()
    def encode_image_batch(self, pixel_batch: np.ndarray) -> np.ndarray:
        pixels = torch.from_numpy(pixel_batch).to(self.device)
        feats = _features(self.model.get_image_features(pixel_values=pixels))
        return feats.cpu().numpy().astype(np.float64)

    @torch.no_grad()
    def encode_text_batch(self, texts) -> np.ndarray:
        input_ids, attention_mask = self.tokenize(list(texts))
        feats = _features(self.model.get_text_features(
            input_ids=input_ids.to(self.device),
            attention_mask=attention_mask.to(self.device),
        ))
        return feats.cpu().numpy().astype(np.float64)


def _special_ids(text_config):
    bos = getattr(text_config, "bos_token_id", None)
    eos = getattr(text_config, "eos_token_id", None)
    pad = getattr(text_config, "pad_token_id", None)
    return bos, eos, pad


def _build_random(name: str, seed: int):
    from transformers import BlipConfig, BlipModel, CLIPConfig, CLIPModel

    torch.manual_seed(seed)
    if name == "clip-vitb32":
        config = CLIPConfig()          # defaults are exactly ViT-B/32, D=512
        model = CLIPModel(config)
    else:
        config = BlipConfig()
        config.vision_config.image_size = 224
        model = BlipModel(config)
    tok = HashTokenizer(config.text_config.vocab_size,
                        *_special_ids(config.text_config))
    return model, tok, config


def _build_pretrained(name: str):
    from transformers import AutoProcessor, BlipModel, CLIPModel

    cls = CLIPModel if name == "clip-vitb32" else BlipModel
    model = cls.from_pretrained(_HUB_IDS[name])
    processor = AutoProcessor.from_pretrained(_HUB_IDS[name])

    def tokenize(texts):
        batch = processor(text=list(texts), return_tensors="pt", padding=True,
                          truncation=True)
        return batch["input_ids"], batch["attention_mask"]

    return model, tokenize, model.config


def build_encoder(name: str, device: str = "cpu", random_init: bool = False,
                  seed: int = 0) -> Encoder:
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    if random_init:
        model, tokenize, config = _build_random(name, seed)
    else:
        model, tokenize, config = _build_pretrained(name)
    model = model.to(device).eval()
    return Encoder(model, tokenize, config.vision_config.image_size,
                   config.projection_dim, device)
