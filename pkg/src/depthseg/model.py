"""Multi-task generator and Wasserstein critic.

The generator is a small hierarchical shifted-window transformer encoder with a
shared upsampling decoder and two per-pixel MLP heads (depth, segmentation).
The critic is a strided convolutional scorer over concatenated depth and
segmentation maps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

HEADS = ("both", "depth", "seg")


@dataclass
class NetConfig:
    in_channels: int = 3
    num_classes: int = 5
    img_size: tuple[int, int] = (64, 64)
    patch_size: int = 4
    window_size: int = 4
    embed_dim: int = 48
    depths: tuple[int, ...] = (2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12)
    mlp_ratio: float = 4.0
    decoder_channels: int = 64
    fine_channels: int = 32
    stem_channels: int = 16
    head_hidden: int = 32
    critic_channels: int = 16
    heads: str = "both"

    def __post_init__(self):
        self.img_size = tuple(int(v) for v in self.img_size)
        self.depths = tuple(int(v) for v in self.depths)
        self.num_heads = tuple(int(v) for v in self.num_heads)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2**i for i in range(self.num_stages)]

    def stage_grids(self) -> list[tuple[int, int]]:
        h, w = self.img_size
        p = self.patch_size
        return [(h // p // 2**i, w // p // 2**i) for i in range(self.num_stages)]

    def stage_windows(self) -> list[tuple[int, int]]:
        """(window, shift) per stage; a grid no larger than the window gets one unshifted window."""
        out = []
        for gh, gw in self.stage_grids():
            if min(gh, gw) <= self.window_size:
                out.append((min(gh, gw), 0))
            else:
                out.append((self.window_size, self.window_size // 2))
        return out

    def validate(self) -> None:
        if self.heads not in HEADS:
            raise ValueError(f"heads must be one of {HEADS}, got {self.heads!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.num_heads) != self.num_stages or self.num_stages < 1:
            raise ValueError(f"depths {self.depths} and num_heads {self.num_heads} must be non-empty and equal length")
        h, w = self.img_size
        unit = self.patch_size * 2 ** (self.num_stages - 1)
        if h % unit or w % unit:
            raise ValueError(
                f"image size {h}x{w} must be divisible by patch_size*2^(stages-1) = {unit}"
            )
        for i, ((gh, gw), (win, _)) in enumerate(zip(self.stage_grids(), self.stage_windows())):
            if gh % win or gw % win:
                raise ValueError(f"stage {i}: window {win} does not divide token grid {gh}x{gw}")
        for i, (dim, nh) in enumerate(zip(self.stage_dims(), self.num_heads)):
            if dim % nh:
                raise ValueError(f"stage {i}: dim {dim} not divisible by {nh} heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["img_size"] = list(self.img_size)
        d["depths"] = list(self.depths)
        d["num_heads"] = list(self.num_heads)
        return d


class Predictions(NamedTuple):
    log_depth: Optional[torch.Tensor]  # B x 1 x H x W, sigmoid output
    seg_logits: Optional[torch.Tensor]  # B x K x H x W


class JointMap(NamedTuple):
    data: torch.Tensor  # B x (1+K) x H x W
    seg_mask: torch.Tensor  # B x H x W, False where segmentation channels are zeroed


# ---------------------------------------------------------------------------
# windowed attention


def window_partition(x: torch.Tensor, win: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // win, win, W // win, win, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, C)


def window_reverse(windows: torch.Tensor, win: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // win, W // win, win, win, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(win: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(win), torch.arange(win), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (win - 1)
    return rel[..., 0] * (2 * win - 1) + rel[..., 1]


def shifted_window_mask(H: int, W: int, win: int, shift: int) -> Optional[torch.Tensor]:
    """Additive attention mask (num_windows, N, N) for the cyclically shifted grid.

    Tokens that land in the same window only because of the cyclic roll are
    separated with -inf.
    """
    if shift == 0:
        return None
    region = torch.zeros(1, H, W, 1)
    cnt = 0
    for hs in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
        for ws in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
            region[:, hs, ws, :] = cnt
            cnt += 1
    ids = window_partition(region, win).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, win: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.win = win
        self.rel_bias = nn.Parameter(torch.zeros((2 * win - 1) ** 2, num_heads))
        self.register_buffer("rel_index", relative_position_index(win), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.view(-1)].view(N, N, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(Bw // nw, nw, self.num_heads, N, N) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(x)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, grid: tuple[int, int], win: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.grid = grid
        self.win = win
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, win)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        mask = shifted_window_mask(grid[0], grid[1], win, shift)
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        h = self.norm1(x)
        if self.shift:
            h = torch.roll(h, shifts=(-self.shift, -self.shift), dims=(1, 2))
        h = self.attn(window_partition(h, self.win), self.attn_mask)
        h = window_reverse(h, self.win, H, W)
        if self.shift:
            h = torch.roll(h, shifts=(self.shift, self.shift), dims=(1, 2))
        x = x + h
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5).flatten(3)
        return self.reduction(self.norm(x))


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        p = cfg.patch_size
        self.patch_embed = nn.Conv2d(cfg.in_channels, cfg.embed_dim, kernel_size=p, stride=p)
        self.embed_norm = nn.LayerNorm(cfg.embed_dim)
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.merges = nn.ModuleList()
        dims = cfg.stage_dims()
        for i, (depth, nh, grid, (win, shift)) in enumerate(
            zip(cfg.depths, cfg.num_heads, cfg.stage_grids(), cfg.stage_windows())
        ):
            blocks = [
                SwinBlock(dims[i], nh, grid, win, shift if j % 2 else 0, cfg.mlp_ratio) for j in range(depth)
            ]
            self.stages.append(nn.Sequential(*blocks))
            self.norms.append(nn.LayerNorm(dims[i]))
            if i < cfg.num_stages - 1:
                self.merges.append(PatchMerging(dims[i]))

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = self.embed_norm(self.patch_embed(img).permute(0, 2, 3, 1))
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            feats.append(self.norms[i](x).permute(0, 3, 1, 2))
            if i < len(self.merges):
                x = self.merges[i](x)
        return feats


class Decoder(nn.Module):
    """Top-down upsampling with lateral skips, then a full-resolution stem skip."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.decoder_channels
        self.laterals = nn.ModuleList(nn.Conv2d(c, d, 1) for c in cfg.stage_dims())
        self.fuse = nn.ModuleList(
            nn.Sequential(nn.Conv2d(d, d, 3, padding=1), nn.GELU()) for _ in range(cfg.num_stages - 1)
        )
        self.reduce = nn.Conv2d(d, cfg.fine_channels, 1)
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_channels, cfg.stem_channels, 3, padding=1), nn.GELU())
        self.out_channels = cfg.fine_channels + cfg.stem_channels

    def forward(self, img: torch.Tensor, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        """Returns channels-last full-resolution features B x H x W x C."""
        x = self.laterals[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            x = F.interpolate(x, size=feats[i].shape[-2:], mode="bilinear", align_corners=False)
            x = self.fuse[i](x + self.laterals[i](feats[i]))
        x = F.interpolate(self.reduce(x), size=img.shape[-2:], mode="bilinear", align_corners=False)
        return torch.cat([x, self.stem(img)], dim=1).permute(0, 2, 3, 1)


def pixel_mlp(c_in: int, hidden: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(c_in, hidden), nn.GELU(), nn.Linear(hidden, c_out))


class MultiTaskNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        c = self.decoder.out_channels
        self.depth_head = pixel_mlp(c, cfg.head_hidden, 1) if cfg.heads in ("both", "depth") else None
        self.seg_head = pixel_mlp(c, cfg.head_hidden, cfg.num_classes) if cfg.heads in ("both", "seg") else None

    def forward(self, images: torch.Tensor) -> Predictions:
        expect = (self.cfg.in_channels, *self.cfg.img_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expect:
            raise ValueError(f"expected images of shape B x {expect[0]} x {expect[1]} x {expect[2]}, got {tuple(images.shape)}")
        x = self.decoder(images, self.encoder(images))
        log_depth = seg = None
        if self.depth_head is not None:
            log_depth = torch.sigmoid(self.depth_head(x)).permute(0, 3, 1, 2)
        if self.seg_head is not None:
            seg = self.seg_head(x).permute(0, 3, 1, 2)
        return Predictions(log_depth, seg)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, WindowAttention):
        nn.init.trunc_normal_(m.rel_bias, std=0.02)


def build_network(
    cfg: NetConfig, seed: int = 0, pretrained: Optional[Mapping[str, torch.Tensor]] = None
) -> MultiTaskNet:
    """Build a generator deterministically from ``seed``.

    ``pretrained`` maps parameter names to arrays and overrides the matching
    initialized values; names must exist and shapes must match.
    """
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = MultiTaskNet(cfg)
        net.apply(_init_weights)
    if pretrained:
        load_named_params(net, pretrained)
    return net


def load_named_params(module: nn.Module, params: Mapping[str, torch.Tensor]) -> None:
    own = dict(module.named_parameters())
    for name, value in params.items():
        if name not in own:
            raise KeyError(f"unknown parameter {name!r}")
        if tuple(own[name].shape) != tuple(value.shape):
            raise ValueError(f"shape mismatch for {name}: {tuple(own[name].shape)} vs {tuple(value.shape)}")
    with torch.no_grad():
        for name, value in params.items():
            own[name].copy_(torch.as_tensor(value))


class Critic(nn.Module):
    """Four stride-2 conv stages, global average pool, linear score.

    No normalization layers: a batch-coupled critic makes the gradient penalty
    ill-defined.
    """

    def __init__(self, in_channels: int, base: int = 16):
        super().__init__()
        layers = []
        c = in_channels
        for i in range(4):
            layers += [nn.Conv2d(c, base * 2**i, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = base * 2**i
        self.features = nn.Sequential(*layers)
        self.score = nn.Linear(c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.score(self.features(x).mean(dim=(2, 3)))


def critic_in_channels(cfg: NetConfig, kind: str = "joint") -> int:
    if kind == "joint":
        return 1 + cfg.num_classes
    if kind == "depth":
        return 1 + cfg.in_channels
    if kind == "seg":
        return cfg.num_classes + cfg.in_channels
    raise ValueError(f"unknown critic kind {kind!r}")


def build_critic(cfg: NetConfig, seed: int = 0, kind: str = "joint") -> Critic:
    """``kind`` = "joint" scores the (1+K)-channel joint map; "depth"/"seg" score
    one task's map concatenated with the RGB input (two-critic mode)."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Critic(critic_in_channels(cfg, kind), cfg.critic_channels)


def make_joint_map(
    depth: torch.Tensor,
    seg: torch.Tensor,
    num_classes: Optional[int] = None,
    ignore_id: int = 255,
    seg_mask: Optional[torch.Tensor] = None,
    depth_valid: Optional[torch.Tensor] = None,
) -> JointMap:
    """Concatenate unit depth (channel 0) with per-class probabilities.

    ``seg`` is either float logits B x K x H x W (softmax applied, differentiable)
    or integer labels B x H x W (one-hot; ``ignore_id`` pixels get all zeros).
    ``seg_mask`` and ``depth_valid`` zero the respective channels so that real
    and generated maps can share one masking pattern.
    """
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise ValueError(f"depth must be B x 1 x H x W, got {tuple(depth.shape)}")
    if seg.is_floating_point():
        if seg.dim() != 4:
            raise ValueError(f"logits must be B x K x H x W, got {tuple(seg.shape)}")
        probs = seg.softmax(dim=1)
        mask = torch.ones(seg.shape[0], *seg.shape[2:], dtype=torch.bool, device=seg.device)
    else:
        if seg.dim() != 3:
            raise ValueError(f"labels must be B x H x W integers, got {tuple(seg.shape)}")
        if num_classes is None:
            raise ValueError("num_classes is required for the label path")
        mask = seg != ignore_id
        if ((seg < 0) | (seg >= num_classes))[mask].any():
            raise ValueError("labels outside {0..K-1} and not ignore_id")
        probs = F.one_hot(torch.where(mask, seg, 0).long(), num_classes).permute(0, 3, 1, 2).to(depth.dtype)
    if seg_mask is not None:
        mask = mask & seg_mask
    probs = probs * mask.unsqueeze(1).to(probs.dtype)
    if depth_valid is not None:
        depth = depth * depth_valid.unsqueeze(1).to(depth.dtype)
    return JointMap(torch.cat([depth, probs], dim=1), mask)


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)
