"""Per-identity prompt token learning (stage 1).

Each accumulated (camera, intra-label) identity owns a block of M learnable
token embeddings. With both encoders frozen, the tokens are trained with
symmetric image-to-text and text-to-image contrastive losses so that each
identity's text feature lines up with its image features. The resulting text
features are cached and reused as fixed semantic targets by the later stages.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .config import RunConfig
from .contrast import cosine_matrix, parameter_checksum
from .data import DatasetManifest
from .encoders import PromptContext


class PromptBank(nn.Module):
    """Learnable prompt tokens for every accumulated identity.

    Token blocks of different identities share no trainable state: the bank
    is a single (N_G x M x D) parameter and each identity owns one row block.
    """

    def __init__(
        self,
        label_index: list[tuple[int, int]],
        token_count: int,
        dim: int,
        temperature: float = 0.05,
        init_std: float = 0.02,
        seed: int = 0,
    ):
        super().__init__()
        if token_count < 1:
            raise ValueError("token_count must be at least 1")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.label_index = [tuple(pair) for pair in label_index]
        self._id_of = {pair: gid for gid, pair in enumerate(self.label_index)}
        self.token_count = token_count
        self.temperature = temperature
        generator = torch.Generator().manual_seed(seed)
        tokens = torch.empty(len(label_index), token_count, dim)
        tokens.normal_(0.0, init_std, generator=generator)
        self.tokens = nn.Parameter(tokens)
        self.register_buffer("cached_text", torch.zeros(len(label_index), dim))
        self.register_buffer("cache_ready", torch.tensor(False))

    @property
    def num_ids(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def global_id_of(self, camera_id: int, intra_label: int) -> int:
        return self._id_of[(camera_id, intra_label)]

    def context_for(self, camera_id: int, intra_label: int) -> PromptContext:
        gid = self.global_id_of(camera_id, intra_label)
        return PromptContext(token_embeddings=self.tokens[gid], owner=(camera_id, intra_label))

    def text_features(self, text_encoder, global_ids: Tensor) -> Tensor:
        """Differentiable text features for a batch of global ids."""
        unique, inverse = torch.unique(global_ids, return_inverse=True)
        feats = torch.stack(
            [text_encoder.encode_tokens(self.tokens[int(gid)]) for gid in unique]
        )
        return feats[inverse]

    @torch.no_grad()
    def cache_text_features(self, text_encoder) -> Tensor:
        feats = torch.stack(
            [text_encoder.encode_tokens(self.tokens[gid]) for gid in range(self.num_ids)]
        )
        self.cached_text.copy_(feats)
        self.cache_ready.fill_(True)
        return self.cached_text

    def cached_text_features(self) -> Tensor:
        if not bool(self.cache_ready):
            raise RuntimeError("text features have not been cached; run the prompt stage first")
        return self.cached_text


def _camera_partitioned_mean(per_anchor: Tensor, camera_ids: Tensor) -> Tensor:
    """Mean of per-anchor terms within each camera, summed over cameras."""
    total = per_anchor.new_zeros(())
    for camera in torch.unique(camera_ids):
        total = total + per_anchor[camera_ids == camera].mean()
    return total


def loss_i2t(
    image_feats: Tensor,
    text_feats: Tensor,
    camera_ids: Tensor,
    labels: Tensor,
    tau: float,
) -> Tensor:
    """Image-to-text contrastive loss over one batch.

    Every batch element contributes its text feature as a candidate; the
    positives of an image anchor are the candidates sharing its label. Each
    anchor averages the -log softmax scores of its positives; anchors are
    averaged per camera and the camera means are summed.
    """
    if image_feats.shape[0] == 0:
        raise ValueError("empty batch")
    sims = cosine_matrix(image_feats, text_feats) / tau
    log_probs = torch.log_softmax(sims, dim=1)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    per_anchor = -(log_probs * same).sum(dim=1) / same.sum(dim=1)
    return _camera_partitioned_mean(per_anchor, camera_ids)


def loss_t2i(
    image_feats: Tensor,
    text_feats: Tensor,
    camera_ids: Tensor,
    labels: Tensor,
    tau: float,
) -> Tensor:
    """Mirror of :func:`loss_i2t` with text anchors ranking image features."""
    if image_feats.shape[0] == 0:
        raise ValueError("empty batch")
    sims = cosine_matrix(text_feats, image_feats) / tau
    log_probs = torch.log_softmax(sims, dim=1)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    per_anchor = -(log_probs * same).sum(dim=1) / same.sum(dim=1)
    return _camera_partitioned_mean(per_anchor, camera_ids)


def loss_prompt(
    image_feats: Tensor,
    text_feats: Tensor,
    camera_ids: Tensor,
    labels: Tensor,
    tau: float,
) -> Tensor:
    return loss_i2t(image_feats, text_feats, camera_ids, labels, tau) + loss_t2i(
        image_feats, text_feats, camera_ids, labels, tau
    )


def run_prompt_stage(
    manifest: DatasetManifest,
    image_encoder,
    text_encoder,
    config: RunConfig,
) -> tuple[PromptBank, list[float]]:
    """Train prompt tokens with both encoders frozen.

    Image features are precomputed once (the encoder is frozen, so they are
    constants). Returns the bank with cached per-identity text features and
    the per-epoch mean loss history. Raises on a non-finite loss, reporting
    the offending step index.
    """
    epochs = config["prompt.epochs"]
    batch_size = config["prompt.batch_size"]
    tau = config["prompt.tau"]

    encoder_digest = parameter_checksum(image_encoder)
    with torch.no_grad():
        image_feats = image_encoder.encode_manifest(manifest)

    bank = PromptBank(
        label_index=[manifest.label_of_global(g) for g in range(manifest.num_global_ids)],
        token_count=config["prompt.tokens"],
        dim=image_feats.shape[1],
        temperature=tau,
        init_std=config["prompt.init_std"],
        seed=config["seed"],
    )
    global_ids = torch.from_numpy(manifest.global_ids())
    camera_ids = torch.from_numpy(manifest.camera_ids())

    optimizer = torch.optim.Adam(bank.parameters(), lr=config["prompt.lr"])
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(epochs, 1))
    rng = np.random.default_rng(config["seed"])
    n = len(manifest)
    iters = math.ceil(n / batch_size)

    history: list[float] = []
    step = 0
    for _ in range(epochs):
        epoch_losses = []
        for _ in range(iters):
            idx = rng.choice(n, size=min(batch_size, n), replace=False)
            idx_t = torch.from_numpy(idx)
            batch_gids = global_ids[idx_t]
            text_feats = bank.text_features(text_encoder, batch_gids)
            loss = loss_prompt(image_feats[idx_t], text_feats, camera_ids[idx_t], batch_gids, tau)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite prompt loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))
            step += 1
        scheduler.step()
        history.append(float(np.mean(epoch_losses)))

    bank.cache_text_features(text_encoder)
    if parameter_checksum(image_encoder) != encoder_digest:
        raise RuntimeError("image encoder parameters changed during the prompt stage")
    return bank, history


def save_prompt_bank(bank: PromptBank, path: str | Path) -> None:
    torch.save(
        {
            "label_index": bank.label_index,
            "token_count": bank.token_count,
            "temperature": bank.temperature,
            "tokens": bank.tokens.detach(),
            "cached_text": bank.cached_text,
            "cache_ready": bool(bank.cache_ready),
        },
        path,
    )


def load_prompt_bank(path: str | Path) -> PromptBank:
    payload = torch.load(path, weights_only=False)
    bank = PromptBank(
        label_index=payload["label_index"],
        token_count=payload["token_count"],
        dim=payload["tokens"].shape[2],
        temperature=payload["temperature"],
    )
    with torch.no_grad():
        bank.tokens.copy_(payload["tokens"])
        bank.cached_text.copy_(payload["cached_text"])
        bank.cache_ready.fill_(payload["cache_ready"])
    return bank
