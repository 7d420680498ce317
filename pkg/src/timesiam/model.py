"""Siamese encoder, past-to-current decoder, projector, and reconstruction loss."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import LOSS_MODES, ModelConfig
from .data import PairBatch, SiamesePair
from .embedding import LineageSet, PatchEmbedding, TokenSequence, VariateEmbedding, add_lineage
from .errors import ConfigError, ShapeError
from .nn import Dropout, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention


class EncoderLayer(Module):
    """Pre-norm block: self-attention then feed-forward, each with a residual."""

    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.dropout, drop_rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.dropout, drop_rng)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, h))
        return x + self.drop(self.ffn(self.norm2(x)))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.layers = [EncoderLayer(cfg, rng, drop_rng) for _ in range(cfg.e_layers)]
        self.norm = LayerNorm(cfg.d_model)

    def __call__(self, tokens: TokenSequence) -> TokenSequence:
        x = tokens.tokens
        for layer in self.layers:
            x = layer(x)
        return TokenSequence(self.norm(x), "encoded")


class DecoderLayer(Module):
    """Cross-attention from current to past, self-attention, feed-forward;
    each sub-block is a residual sum followed by LayerNorm."""

    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.dropout, drop_rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.dropout, drop_rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.dropout, drop_rng)
        self.norm3 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def __call__(self, curr: Tensor, past: Tensor) -> Tensor:
        h = self.norm1(curr + self.drop(self.cross_attn(curr, past, past)))
        h = self.norm2(h + self.drop(self.self_attn(h, h, h)))
        return self.norm3(h + self.drop(self.ffn(h)))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        self.layers = [DecoderLayer(cfg, rng, drop_rng) for _ in range(cfg.d_layers)]

    def __call__(self, h_curr: TokenSequence, h_past: TokenSequence) -> TokenSequence:
        if h_curr.tokens.shape[:2] != h_past.tokens.shape[:2]:
            raise ShapeError(
                f"decoder inputs disagree on batch/group layout: {h_curr.tokens.shape} vs {h_past.tokens.shape}"
            )
        if h_curr.d_model != h_past.d_model:
            raise ShapeError("decoder inputs have different model dimensions")
        x = h_curr.tokens
        for layer in self.layers:
            x = layer(x, h_past.tokens)
        return TokenSequence(x, "decoded")


class Projector(Module):
    """Linear map of decoded tokens back to a ``(B, T, C)`` window."""

    def __init__(self, cfg: ModelConfig, rng):
        self.backbone = cfg.backbone
        self.seq_len = cfg.seq_len
        out = cfg.patch_len if cfg.backbone == "patch" else cfg.seq_len
        self.linear = Linear(cfg.d_model, out, rng)

    def __call__(self, h: TokenSequence) -> Tensor:
        y = self.linear(h.tokens)
        b, g, m, p = y.shape
        if self.backbone == "patch":
            y = y.reshape(b, g, m * p)  # (B, C, T)
        else:
            y = y.reshape(b, m, p)  # (B, C, T)
        if y.shape[-1] != self.seq_len:
            raise ShapeError(f"projector produced length {y.shape[-1]}, expected {self.seq_len}")
        return y.transpose(0, 2, 1)


def reconstruction_loss(x_curr, x_hat: Tensor, mask=None, mode: str = "all") -> Tensor:
    """Squared reconstruction error, averaged over all elements or masked ones only."""
    if mode not in LOSS_MODES:
        raise ConfigError(f"loss mode must be one of {LOSS_MODES}")
    target = x_curr if isinstance(x_curr, Tensor) else Tensor(np.asarray(x_curr, dtype=x_hat.dtype))
    if target.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shapes differ: {target.shape} vs {x_hat.shape}")
    if mode == "all":
        return ag.mse(x_hat, target)
    if mask is None or not np.any(mask):
        raise ValueError("masked_only loss needs a non-empty mask")
    return ag.masked_mse(x_hat, target, np.asarray(mask))


class SiameseModel(Module):
    """One embedding stack, one lineage set, one encoder shared by both
    branches, one decoder, one projector."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        init_seq, drop_seq = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_seq)
        self._drop_rng = np.random.default_rng(drop_seq)
        if config.backbone == "patch":
            self.embedding = PatchEmbedding(config.seq_len, config.patch_len, config.d_model, rng)
        else:
            self.embedding = VariateEmbedding(config.seq_len, config.d_model, rng)
        self.lineage = LineageSet(config.n_lineages, config.d_model, config.seq_len, config.sampling_ratio, rng)
        self.encoder = Encoder(config, rng, self._drop_rng)
        self.decoder = Decoder(config, rng, self._drop_rng)
        self.projector = Projector(config, rng)

    def reseed_dropout(self, seed: int) -> None:
        self._drop_rng.bit_generator.state = np.random.default_rng(seed).bit_generator.state

    def _input(self, window) -> Tensor:
        x = np.asarray(window.data if isinstance(window, Tensor) else window, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.config.n_channels:
            raise ShapeError(f"expected windows of shape (B, T, {self.config.n_channels}), got {x.shape}")
        return Tensor(x)

    def embed(self, window, lineage_index) -> TokenSequence:
        """Embed ``(B, T, C)`` windows and add the lineage row(s) ``lineage_index``."""
        x = self._input(window)
        tokens = self.embedding(x)
        idx = np.broadcast_to(np.asarray(lineage_index, dtype=np.int64), (x.shape[0],))
        return add_lineage(tokens, self.lineage.rows(idx))

    def encode(self, tokens: TokenSequence) -> TokenSequence:
        return self.encoder(tokens)

    def decode(self, h_curr: TokenSequence, h_past: TokenSequence) -> TokenSequence:
        return self.decoder(h_curr, h_past)

    def project(self, h_d: TokenSequence) -> Tensor:
        return self.projector(h_d)

    def represent(self, window, lineage_index: int = 0) -> TokenSequence:
        return self.encode(self.embed(window, lineage_index))

    def pretrain_forward(self, batch, loss_mode: str = "all"):
        """Loss and reconstruction for a :class:`PairBatch` (or a single pair)."""
        if isinstance(batch, SiamesePair):
            batch = PairBatch.stack([batch])
        past_idx = self.lineage.match(batch.d)
        z_past = self.embed(batch.x_past, past_idx)
        z_curr = self.embed(batch.x_curr_masked, 0)
        n = len(batch)
        both = self.encode(TokenSequence(ag.concat([z_past.tokens, z_curr.tokens], axis=0)))
        h_past = TokenSequence(both.tokens[:n], "encoded")
        h_curr = TokenSequence(both.tokens[n:], "encoded")
        x_hat = self.project(self.decode(h_curr, h_past))
        loss = reconstruction_loss(batch.x_curr.astype(self.dtype), x_hat, batch.mask, loss_mode)
        return loss, x_hat

    def checkpoint_config(self) -> dict:
        return {"model": self.config.to_dict()}

    def encoder_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(("embedding.", "encoder."))]


def pretrain_forward(pair, model: SiameseModel, loss_mode: str = "all"):
    return model.pretrain_forward(pair, loss_mode)


def encode(tokens: TokenSequence, model: SiameseModel) -> TokenSequence:
    return model.encode(tokens)


def decode(h_curr: TokenSequence, h_past: TokenSequence, model: SiameseModel) -> TokenSequence:
    return model.decode(h_curr, h_past)


def project(h_d: TokenSequence, model: SiameseModel) -> Tensor:
    return model.project(h_d)


def count_parameters(model: Module) -> int:
    return model.num_parameters()
