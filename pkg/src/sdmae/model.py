"""Lightweight masked auto-encoder with a shared encoder and teacher/student decoders.

Layout of one forward pass::

    frame ──conv d×d/stride d──► n tokens ──drop masked──► encoder blocks
          ──► decoder projection + mask tokens + positions ──► teacher block 1 ─┬─► teacher blocks 2.. ─► head ─► teacher patches
                                                                                └─► student block(s)   ─► head ─► student patches

Every dense map inside a block is a pointwise (1x1) convolution over the token
sequence.  Patches are flattened in (row, col, channel) order and tokens are
row-major over the (h/d, w/d) grid.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig, validate_config

CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------------
# patches and masks


@dataclass
class PatchGrid:
    patches: np.ndarray  # (n, d, d, c')
    grid: tuple[int, int]

    @property
    def n(self) -> int:
        return self.patches.shape[0]


def patchify(x: np.ndarray, d: int) -> PatchGrid:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    h, w, c = x.shape
    if h % d or w % d:
        raise ValueError(f"{h}x{w} is not divisible by patch size {d}")
    gh, gw = h // d, w // d
    patches = x.reshape(gh, d, gw, d, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, d, d, c)
    return PatchGrid(patches, (gh, gw))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    gh, gw = grid.grid
    n, d, d2, c = grid.patches.shape
    if n != gh * gw or d != d2:
        raise ValueError(f"{n} patches of {d}x{d2} do not fill a {gh}x{gw} grid")
    return grid.patches.reshape(gh, gw, d, d, c).transpose(0, 2, 1, 3, 4).reshape(gh * d, gw * d, c)


def patchify_tensor(x: torch.Tensor, d: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, n, d*d*C), same ordering as :func:`patchify`."""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // d, d, w // d, d).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (h // d) * (w // d), d * d * c)


def unpatchify_tensor(p: torch.Tensor, d: int, grid: tuple[int, int]) -> torch.Tensor:
    """(B, n, d*d*C) -> (B, C, H, W)."""
    b, n, k = p.shape
    gh, gw = grid
    c = k // (d * d)
    x = p.reshape(b, gh, gw, d, d, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, gh * d, gw * d)


@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    n: int


def num_masked(n: int, ratio: float) -> int:
    return int(round(ratio * n))


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    k = num_masked(n, ratio)
    if k >= n:
        raise ValueError(f"masking {k} of {n} tokens leaves none visible")
    perm = rng.permutation(n)
    return MaskPlan(np.sort(perm[k:]), np.sort(perm[:k]), n)


# ----------------------------------------------------------------------------
# layers


class Pointwise(nn.Module):
    """1x1 convolution over a (B, N, D) token sequence."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv1d(d_in, d_out, kernel_size=1, bias=bias)

    def forward(self, x):
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


def dense(d_in: int, d_out: int, kind: str) -> nn.Module:
    return Pointwise(d_in, d_out) if kind == "pointwise" else nn.Linear(d_in, d_out)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kind: str):
        super().__init__()
        self.heads = heads
        self.qkv = dense(dim, 3 * dim, kind)
        self.proj = dense(dim, dim, kind)

    def forward(self, x):
        b, n, dim = x.shape
        hd = dim // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, dim))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, kind: str = "pointwise"):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, kind)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            dense(dim, mlp_ratio * dim, kind), nn.GELU(), dense(mlp_ratio * dim, dim, kind)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def _gather(tokens: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(tokens, 1, idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


class Encoder(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        d = cfg.patch_size
        self.embed = nn.Conv2d(cfg.channels, cfg.encoder_dim, kernel_size=d, stride=d)
        self.blocks = nn.ModuleList(
            Block(cfg.encoder_dim, cfg.attention_heads, cfg.mlp_ratio, cfg.ffn_type)
            for _ in range(cfg.encoder_blocks)
        )
        self.norm = nn.LayerNorm(cfg.encoder_dim)
        self.calls = 0

    def forward(self, x, visible):
        self.calls += 1
        tokens = self.embed(x).flatten(2).transpose(1, 2)  # (B, n, E)
        tokens = _gather(tokens, visible)
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)


class TeacherDecoder(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        dim = cfg.decoder_dim
        self.proj = Pointwise(cfg.encoder_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, dim))
        self.blocks = nn.ModuleList(
            Block(dim, cfg.attention_heads, cfg.mlp_ratio, cfg.ffn_type)
            for _ in range(cfg.teacher_decoder_blocks)
        )
        self.norm = nn.LayerNorm(dim)
        self.head = Pointwise(dim, cfg.patch_size ** 2 * cfg.out_channels)

    def first_block(self, latent, visible):
        b = latent.shape[0]
        n = self.pos_embed.shape[1]
        z = self.proj(latent)
        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, visible.unsqueeze(-1).expand(-1, -1, z.shape[-1]), z)
        return self.blocks[0](full + self.pos_embed)

    def rest(self, h):
        for blk in self.blocks[1:]:
            h = blk(h)
        return self.head(self.norm(h))


class StudentDecoder(nn.Module):
    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        dim = cfg.decoder_dim
        self.blocks = nn.ModuleList(
            Block(dim, cfg.attention_heads, cfg.mlp_ratio, cfg.ffn_type)
            for _ in range(cfg.student_decoder_blocks)
        )
        self.norm = nn.LayerNorm(dim)
        self.head = Pointwise(dim, cfg.patch_size ** 2 * cfg.out_channels)

    def forward(self, h):
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.norm(h))


class SelfDistilledMAE(nn.Module):
    """Shared encoder, teacher decoder and a one-block student branch.

    ``stage`` records how far training has progressed: ``init``, ``teacher``
    (teacher trained, student untouched) or ``student``.
    """

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg
        self.fingerprint = cfg.fingerprint()
        self.stage = "init"
        self.encoder = Encoder(cfg)
        self.teacher_decoder = TeacherDecoder(cfg)
        self.student_decoder = StudentDecoder(cfg)

    def forward(self, x: torch.Tensor, visible: torch.Tensor):
        """x: (B, c, h, w); visible: (B, n_visible) token indices.

        Returns teacher and student patches, each (B, n, d*d*c').
        """
        latent = self.encoder(x, visible)
        h1 = self.teacher_decoder.first_block(latent, visible)
        return self.teacher_decoder.rest(h1), self.student_decoder(h1)

    def teacher_parameters(self):
        yield from self.encoder.parameters()
        yield from self.teacher_decoder.parameters()


def _init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if isinstance(module, SelfDistilledMAE):
        nn.init.trunc_normal_(module.teacher_decoder.mask_token, std=0.02)
        nn.init.trunc_normal_(module.teacher_decoder.pos_embed, std=0.02)


def init_model(cfg: ExperimentConfig, seed: int = 0) -> SelfDistilledMAE:
    validate_config(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SelfDistilledMAE(cfg)
        _init_weights(model)
    return model


def visible_tensor(plans: list[MaskPlan]) -> torch.Tensor:
    return torch.as_tensor(np.stack([p.visible for p in plans]), dtype=torch.long)


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(B, h, w, c) or (h, w, c) array -> (B, c, h, w) tensor."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    return torch.as_tensor(frames, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def forward(model: SelfDistilledMAE, frame: np.ndarray, plan: MaskPlan) -> tuple[PatchGrid, PatchGrid]:
    """Evaluate one frame; returns teacher and student outputs as patch grids."""
    cfg = model.cfg
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.shape != (cfg.frame_height, cfg.frame_width, cfg.channels):
        raise ValueError(f"frame shape {frame.shape} does not match the model config")
    if plan.n != cfg.num_tokens:
        raise ValueError(f"mask plan covers {plan.n} tokens, model expects {cfg.num_tokens}")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        t, s = model(frames_to_tensor(frame, dtype), visible_tensor([plan]))
    model.train(was_training)
    d, c = cfg.patch_size, cfg.out_channels
    shape = (cfg.num_tokens, d, d, c)
    return (PatchGrid(t[0].numpy().reshape(shape), cfg.grid),
            PatchGrid(s[0].numpy().reshape(shape), cfg.grid))


# ----------------------------------------------------------------------------
# accounting


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _block_flops(tokens: int, dim: int, heads: int, mlp_ratio: int) -> float:
    # qkv + output projection + two feed-forward maps, then QK^T and AV
    linear = tokens * dim * (3 * dim) + tokens * dim * dim + 2 * tokens * dim * (mlp_ratio * dim)
    attention = 2 * tokens * tokens * dim
    return 2.0 * (linear + attention)


def estimate_flops(cfg: ExperimentConfig) -> float:
    """Analytic FLOPs (2 per multiply-add) of one inference forward pass.

    Counted terms: the d x d patch embedding over all n tokens, encoder blocks
    over the visible tokens at ``inference_mask_ratio``, the encoder->decoder
    projection over visible tokens, teacher and student blocks over all n
    tokens and the two per-patch output heads.  Norms, softmax, activations
    and biases are ignored.
    """
    n = cfg.num_tokens
    nv = n - num_masked(n, cfg.inference_mask_ratio)
    d, c = cfg.patch_size, cfg.channels
    patch_out = d * d * cfg.out_channels
    flops = 2.0 * n * (d * d * c) * cfg.encoder_dim
    flops += 2.0 * nv * cfg.encoder_dim * cfg.decoder_dim
    flops += 2 * (2.0 * n * cfg.decoder_dim * patch_out)
    flops += cfg.encoder_blocks * _block_flops(nv, cfg.encoder_dim, cfg.attention_heads, cfg.mlp_ratio)
    dec_blocks = cfg.teacher_decoder_blocks + cfg.student_decoder_blocks
    flops += dec_blocks * _block_flops(n, cfg.decoder_dim, cfg.attention_heads, cfg.mlp_ratio)
    return flops


def parameter_digest(modules) -> str:
    """sha256 over the raw bytes of every parameter of the given modules."""
    h = hashlib.sha256()
    for module in modules:
        for name, p in module.named_parameters():
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# checkpoints


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: SelfDistilledMAE, prefix: str | Path, seed: int) -> tuple[Path, Path]:
    """Write ``<prefix>.npz`` (named arrays) and ``<prefix>.manifest`` (text)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    blob = prefix.with_suffix(".npz")
    with open(blob, "wb") as fh:
        np.savez(fh, **arrays)
    manifest = prefix.with_suffix(".manifest")
    manifest.write_text(
        f"format_version = {CHECKPOINT_VERSION}\n"
        f"fingerprint = {model.fingerprint}\n"
        f"stage = {model.stage}\n"
        f"seed = {seed}\n"
    )
    return blob, manifest


def read_manifest(prefix: str | Path) -> dict[str, str]:
    path = Path(prefix).with_suffix(".manifest")
    if not path.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_checkpoint(prefix: str | Path, cfg: ExperimentConfig) -> SelfDistilledMAE:
    manifest = read_manifest(prefix)
    if int(manifest.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    if manifest.get("fingerprint") != cfg.fingerprint():
        raise CheckpointError(
            f"checkpoint fingerprint {manifest.get('fingerprint')} does not match config {cfg.fingerprint()}"
        )
    model = SelfDistilledMAE(validate_config(cfg))
    with np.load(Path(prefix).with_suffix(".npz")) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    model.load_state_dict(state)
    model.stage = manifest.get("stage", "init")
    return model
