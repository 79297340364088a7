"""Image and text encoders behind one small interface.

Two implementations are provided. The toy encoder reads synthetic latent
vectors from a lookup table and passes them through a trainable linear head,
so the whole training pipeline runs without any image files. The pretrained
adapter wraps a TorchScript archive exposing ``encode_image`` and
``encode_text`` and is never trained here.

Features are 1-D float tensors; every public encode method returns unit-norm
output unless ``normalize=False`` is passed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .contrast import cosine_matrix, l2_normalize
from .data import DatasetManifest, Sample


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two feature vectors; rejects zero vectors."""
    if a.norm() == 0 or b.norm() == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return cosine_matrix(a.unsqueeze(0), b.unsqueeze(0)).squeeze()


@dataclass
class PromptContext:
    """Learnable token block of one identity's textual prompt.

    The surrounding template is fixed; only ``token_embeddings`` (M x D)
    train during the prompt stage.
    """

    token_embeddings: Tensor
    owner: tuple[int, int] | int
    template: str = "a photo of {tokens} person"
    trainable: bool = field(default=True)

    def __post_init__(self):
        if self.token_embeddings.ndim != 2 or self.token_embeddings.shape[0] < 1:
            raise ValueError("token_embeddings must be an (M >= 1) x D matrix")


class ToyImageEncoder(nn.Module):
    """Trainable linear head over a table of synthetic latent vectors.

    Args:
        latents: map image_ref -> latent vector (all the same dimension).
        out_dim: output feature dimension; defaults to the latent dimension,
            in which case the head starts as the identity map.
        seed: initializer seed for non-square heads.
    """

    def __init__(self, latents: dict[str, np.ndarray], out_dim: int | None = None, seed: int = 0):
        super().__init__()
        if not latents:
            raise ValueError("latent table is empty")
        refs = sorted(latents)
        table = np.stack([np.asarray(latents[ref], dtype=np.float32) for ref in refs])
        self._row_of = {ref: i for i, ref in enumerate(refs)}
        self.register_buffer("table", torch.from_numpy(table))
        in_dim = table.shape[1]
        out_dim = in_dim if out_dim is None else int(out_dim)
        self.head = nn.Linear(in_dim, out_dim, bias=False)
        with torch.no_grad():
            if out_dim == in_dim:
                self.head.weight.copy_(torch.eye(in_dim))
            else:
                generator = torch.Generator().manual_seed(seed)
                self.head.weight.normal_(0.0, in_dim**-0.5, generator=generator)

    @property
    def dim(self) -> int:
        return self.head.weight.shape[0]

    def forward(self, latent_rows: Tensor, normalize: bool = True) -> Tensor:
        out = self.head(latent_rows)
        return l2_normalize(out) if normalize else out

    def encode_refs(self, refs: list[str], normalize: bool = True) -> Tensor:
        try:
            rows = torch.tensor([self._row_of[ref] for ref in refs])
        except KeyError as exc:
            raise LookupError(f"unknown image_ref {exc.args[0]!r}") from exc
        return self.forward(self.table[rows], normalize=normalize)

    def encode_image(self, sample: Sample, normalize: bool = True) -> Tensor:
        return self.encode_refs([sample.image_ref], normalize=normalize).squeeze(0)

    def encode_manifest(self, manifest: DatasetManifest, normalize: bool = True) -> Tensor:
        return self.encode_refs([s.image_ref for s in manifest.samples], normalize=normalize)


class ToyTextEncoder(nn.Module):
    """Deterministic text encoder: mean of the prompt tokens, unit-normed.

    Has no parameters of its own; gradients flow back into the token
    embeddings, which is exactly the prompt-stage training contract.
    """

    def encode_tokens(self, token_embeddings: Tensor, normalize: bool = True) -> Tensor:
        mean = token_embeddings.mean(dim=0)
        return l2_normalize(mean) if normalize else mean

    def encode_prompt(self, context: PromptContext, normalize: bool = True) -> Tensor:
        return self.encode_tokens(context.token_embeddings, normalize=normalize)

    def forward(self, token_embeddings: Tensor) -> Tensor:
        return self.encode_tokens(token_embeddings)


class PretrainedAdapter(nn.Module):
    """Frozen wrapper around a TorchScript vision-language archive.

    The archive must expose ``encode_image(batch)`` over image tensors and
    ``encode_text(tokens)`` over an (M x D) token block. Image refs ending in
    ``.npy`` are loaded as arrays; anything else is decoded with Pillow and
    scaled to ``input_size``.
    """

    def __init__(self, weights_ref: str, input_size: tuple[int, int] = (256, 128)):
        super().__init__()
        self.backbone = torch.jit.load(weights_ref)
        self.backbone.eval()
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.input_size = input_size

    def _load_image(self, image_ref: str) -> Tensor:
        if image_ref.endswith(".npy"):
            return torch.from_numpy(np.load(image_ref).astype(np.float32))
        from PIL import Image

        with Image.open(image_ref) as img:
            img = img.convert("RGB").resize((self.input_size[1], self.input_size[0]))
            array = np.asarray(img, dtype=np.float32) / 255.0
        return torch.from_numpy(array).permute(2, 0, 1)

    def encode_image(self, sample: Sample, normalize: bool = True) -> Tensor:
        with torch.no_grad():
            feat = self.backbone.encode_image(self._load_image(sample.image_ref).unsqueeze(0))
        feat = feat.squeeze(0)
        return l2_normalize(feat) if normalize else feat

    def encode_manifest(self, manifest: DatasetManifest, normalize: bool = True) -> Tensor:
        return torch.stack([self.encode_image(s, normalize=normalize) for s in manifest.samples])

    def encode_tokens(self, token_embeddings: Tensor, normalize: bool = True) -> Tensor:
        feat = self.backbone.encode_text(token_embeddings.unsqueeze(0)).squeeze(0)
        return l2_normalize(feat) if normalize else feat


def build_image_encoder(config, latents: dict[str, np.ndarray] | None = None):
    """Construct the image encoder named by ``encoder.kind``."""
    kind = config["encoder.kind"]
    if kind == "toy":
        if latents is None:
            raise ValueError("toy encoder needs a latent table")
        return ToyImageEncoder(latents, out_dim=config["encoder.dim"], seed=config["seed"])
    if kind == "pretrained":
        ref = config["encoder.weights_ref"]
        if not ref:
            raise ValueError("encoder.weights_ref is required for the pretrained adapter")
        return PretrainedAdapter(ref)
    raise ValueError(f"unknown encoder.kind: {kind!r}")


def build_text_encoder(config):
    kind = config["encoder.kind"]
    if kind == "toy":
        return ToyTextEncoder()
    if kind == "pretrained":
        return PretrainedAdapter(config["encoder.weights_ref"])
    raise ValueError(f"unknown encoder.kind: {kind!r}")
