"""Frozen spatio-temporal transformer encoder with LoRA-aware attention.

The encoder is a small pre-norm ViT over tubelets: embed, add fixed
sinusoidal positions, ``num_blocks`` x (attention, MLP), final layer norm,
mean pool, linear head.  Forward and backward passes are written out by hand
in numpy; gradients are only produced for trainable tensors (adapter factors
and the classifier head), but they flow back through every frozen layer above
the lowest adapted block.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lora import PROJECTIONS, LoraAdapter, PlacementPolicy, apply_adapted_projection
from .numerics import ShapeError, stable_softmax


@dataclass
class EncoderConfig:
    d: int = 64
    num_blocks: int = 8
    heads: int = 4
    tubelet: tuple[int, int, int] = (2, 8, 8)
    mlp_ratio: int = 4
    num_classes: int = 4
    clip_length: int = 16
    image_size: int = 32
    seed: int = 0
    init_std: float = 0.02
    pos_scale: float = 0.1
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.tubelet = tuple(int(t) for t in self.tubelet)
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.num_blocks < 2:
            raise ValueError("need at least 2 blocks")
        t, h, w = self.tubelet
        if self.clip_length % t or self.image_size % h or self.image_size % w:
            raise ValueError(
                f"tubelet {self.tubelet} does not divide clip ({self.clip_length}, "
                f"{self.image_size}, {self.image_size})")

    @property
    def grid(self) -> tuple[int, int, int]:
        t, h, w = self.tubelet
        return self.clip_length // t, self.image_size // h, self.image_size // w

    @property
    def num_tokens(self) -> int:
        nt, nh, nw = self.grid
        return nt * nh * nw

    @property
    def patch_dim(self) -> int:
        t, h, w = self.tubelet
        return t * h * w * 3

    @property
    def mlp_dim(self) -> int:
        return self.d * self.mlp_ratio

    def to_dict(self) -> dict:
        out = asdict(self)
        out["tubelet"] = list(self.tubelet)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        """ViT-L-sized layout at 224 px; only used for parameter accounting."""
        return cls(d=1024, num_blocks=24, heads=16, tubelet=(2, 16, 16),
                   clip_length=16, image_size=224)


def frozen_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.d, cfg.mlp_dim
    shapes = {"embed.W": (cfg.patch_dim, d), "embed.b": (d,)}
    for i in range(cfg.num_blocks):
        p = f"block{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.q": (d, d), p + "attn.k": (d, d), p + "attn.v": (d, d),
            p + "attn.o": (d, d), p + "attn.o_bias": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.W1": (d, m), p + "mlp.b1": (m,),
            p + "mlp.W2": (m, d), p + "mlp.b2": (d,),
        })
    shapes.update({"final_ln.g": (d,), "final_ln.b": (d,)})
    return shapes


def head_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {"head.W": (cfg.d, cfg.num_classes), "head.b": (cfg.num_classes,)}


def sinusoidal_positions(num_tokens: int, d: int) -> np.ndarray:
    pos = np.arange(num_tokens)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
    pe = np.zeros((num_tokens, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: d // 2])
    return pe


def init_weights(cfg: EncoderConfig) -> tuple[dict, dict]:
    """Seeded Gaussian (std ``init_std``) weights; layer norms start at identity."""
    rng = np.random.default_rng(cfg.seed)
    frozen = {}
    for name, shape in frozen_param_shapes(cfg).items():
        if name.endswith(".g"):
            frozen[name] = np.ones(shape)
        elif ".ln" in name or name.startswith("final_ln"):
            frozen[name] = np.zeros(shape)
        else:
            frozen[name] = rng.normal(0.0, cfg.init_std, size=shape)
    head = {
        "head.W": rng.normal(0.0, cfg.init_std, size=(cfg.d, cfg.num_classes)),
        "head.b": np.zeros(cfg.num_classes),
    }
    return frozen, head


# -- layer primitives ------------------------------------------------------

def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    # tanh(c x (1 + 0.044715 x^2)), evaluated in place
    inner = 0.044715 * x
    inner *= x
    inner += 1.0
    t = _GELU_C * x
    t *= inner
    np.tanh(t, out=t)
    out = 0.5 * x
    out *= 1.0 + t
    return out, t


def _gelu_backward(dy, x, t):
    slope = 3 * 0.044715 * x
    slope *= x
    slope += 1.0
    g = 0.5 * x
    g *= 1.0 - t * t
    g *= _GELU_C
    g *= slope
    g += 0.5 * (1.0 + t)
    g *= dy
    return g


def patchify(frames: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """(B, N, H, W, 3) frames -> (B, L_tok, t*h*w*3) non-overlapping tubelets."""
    if frames.ndim == 4:
        frames = frames[None]
    B, N, H, W, ch = frames.shape
    t, h, w = cfg.tubelet
    if N % t or H % h or W % w or ch != 3:
        raise ShapeError(f"tubelet {cfg.tubelet} does not divide clip shape {frames.shape[1:]}")
    x = frames.reshape(B, N // t, t, H // h, h, W // w, w, 3)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(B, (N // t) * (H // h) * (W // w), t * h * w * 3)


def tubelet_embed(frames: np.ndarray, cfg: EncoderConfig, weights: dict) -> np.ndarray:
    """Linear tubelet embedding (no positional term); (N,H,W,3) -> (L_tok, d)."""
    single = frames.ndim == 4
    tokens = patchify(np.asarray(frames, dtype=np.float64), cfg) @ weights["embed.W"] + weights["embed.b"]
    return tokens[0] if single else tokens


def attention_forward(X: np.ndarray, block: dict, adapters: dict | None, heads: int,
                      eps: float = 1e-6, return_cache: bool = False):
    """Pre-norm multi-head self-attention sublayer with residual: X + Attn(LN(X)).

    ``block`` holds the frozen ``ln1.g, ln1.b, attn.q/k/v/o, attn.o_bias`` of one
    block; ``adapters`` maps ``'q'|'k'|'v'`` to a :class:`LoraAdapter` or None.
    Accepts (L, d) or (B, L, d) token matrices.
    """
    single = X.ndim == 2
    if single:
        X = X[None]
    Bsz, T, d = X.shape
    if block["attn.q"].shape != (d, d):
        raise ShapeError(f"token width {d} does not match projection {block['attn.q'].shape}")
    adapters = adapters or {}
    dh = d // heads
    h, ln_cache = _layer_norm(X, block["ln1.g"], block["ln1.b"], eps)
    qkv = {p: apply_adapted_projection(h, block["attn." + p], adapters.get(p)) for p in PROJECTIONS}
    split = {p: v.reshape(Bsz, T, heads, dh).transpose(0, 2, 1, 3) for p, v in qkv.items()}
    scale = 1.0 / math.sqrt(dh)
    S = split["q"] @ split["k"].transpose(0, 1, 3, 2)
    S *= scale
    P = stable_softmax(S)
    O = (P @ split["v"]).transpose(0, 2, 1, 3).reshape(Bsz, T, d)
    out = X + O @ block["attn.o"] + block["attn.o_bias"]
    if single:
        out = out[0]
    if not return_cache:
        return out
    return out, {"h": h, "ln": ln_cache, "split": split, "P": P, "O": O, "scale": scale}


def _attention_backward(dout, block, adapters, heads, cache, grads, prefix, input_grad=True):
    """Adapter gradients into ``grads``; returns d(loss)/d(input) unless ``input_grad`` is off."""
    Bsz, T, d = dout.shape
    dh = d // heads
    split, P, scale, h = cache["split"], cache["P"], cache["scale"], cache["h"]
    dO = dout @ block["attn.o"].T
    dOh = dO.reshape(Bsz, T, heads, dh).transpose(0, 2, 1, 3)
    dP = dOh @ split["v"].transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ dOh
    dS = dP
    dS -= (dP * P).sum(axis=-1, keepdims=True)
    dS *= P
    dq = (dS @ split["k"]) * scale
    dk = (dS.transpose(0, 1, 3, 2) @ split["q"]) * scale
    dh_total = np.zeros_like(h) if input_grad else None
    h2d = h.reshape(-1, d)
    for p, g in (("q", dq), ("k", dk), ("v", dv)):
        g2d = g.transpose(0, 2, 1, 3).reshape(-1, d)
        ad = adapters.get(p)
        if input_grad:
            dh_total += (g2d @ block["attn." + p].T).reshape(h.shape)
        if ad is not None:
            gB = g2d @ ad.B.T  # (BT, r)
            if input_grad:
                dh_total += (ad.scale * (gB @ ad.A.T)).reshape(h.shape)
            grads[f"{prefix}.{p}.A"] = ad.scale * (h2d.T @ gB)
            grads[f"{prefix}.{p}.B"] = ad.scale * ((h2d @ ad.A).T @ g2d)
    if not input_grad:
        return None
    return dout + _layer_norm_backward(dh_total, block["ln1.g"], cache["ln"])


def mlp_forward(X, block, eps=1e-6, return_cache=False):
    h, ln_cache = _layer_norm(X, block["ln2.g"], block["ln2.b"], eps)
    pre = h @ block["mlp.W1"]
    pre += block["mlp.b1"]
    act, t = _gelu(pre)
    out = X + act @ block["mlp.W2"] + block["mlp.b2"]
    if not return_cache:
        return out
    return out, {"ln": ln_cache, "pre": pre, "t": t}


def _mlp_backward(dout, block, cache):
    dact = dout @ block["mlp.W2"].T
    dpre = _gelu_backward(dact, cache["pre"], cache["t"])
    dh = dpre @ block["mlp.W1"].T
    return dout + _layer_norm_backward(dh, block["ln2.g"], cache["ln"])


# -- model -----------------------------------------------------------------

_BLOCK_KEYS = ("ln1.g", "ln1.b", "attn.q", "attn.k", "attn.v", "attn.o", "attn.o_bias",
               "ln2.g", "ln2.b", "mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2")


@dataclass
class PriorNetModel:
    """Frozen encoder + trainable head + optional per-block Q/K/V adapters.

    ``placeholders`` records whether the model consumes zero-frame
    placeholders (True) or clips whose failed frames were back-filled.
    """

    cfg: EncoderConfig
    frozen: dict
    head: dict
    adapters: dict = field(default_factory=dict)
    policy: PlacementPolicy = field(default_factory=PlacementPolicy.none)
    placeholders: bool = True

    @classmethod
    def build(cls, cfg: EncoderConfig) -> "PriorNetModel":
        frozen, head = init_weights(cfg)
        return cls(cfg=cfg, frozen=frozen, head=head)

    def __post_init__(self):
        self._pos = sinusoidal_positions(self.cfg.num_tokens, self.cfg.d) * self.cfg.pos_scale
        self._blocks = [{k: self.frozen[f"block{i}.{k}"] for k in _BLOCK_KEYS}
                        for i in range(self.cfg.num_blocks)]

    def block_weights(self, i: int) -> dict:
        return self._blocks[i]

    def block_adapters(self, i: int) -> dict:
        return {p: self.adapters[(i, p)] for p in PROJECTIONS if (i, p) in self.adapters}

    # forward ---------------------------------------------------------------

    def embed(self, frames: np.ndarray) -> np.ndarray:
        """Token embedding plus positions, (B, L_tok, d)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 4:
            frames = frames[None]
        return tubelet_embed(frames, self.cfg, self.frozen) + self._pos

    def run_blocks(self, x: np.ndarray, return_cache: bool = False):
        caches = []
        eps = self.cfg.ln_eps
        for i in range(self.cfg.num_blocks):
            if return_cache:
                x, ca = attention_forward(x, self._blocks[i], self.block_adapters(i),
                                          self.cfg.heads, eps, return_cache=True)
                x, cm = mlp_forward(x, self._blocks[i], eps, return_cache=True)
                caches.append((ca, cm))
            else:
                x = attention_forward(x, self._blocks[i], self.block_adapters(i), self.cfg.heads, eps)
                x = mlp_forward(x, self._blocks[i], eps)
        hf, ln_cache = _layer_norm(x, self.frozen["final_ln.g"], self.frozen["final_ln.b"], eps)
        feat = hf.mean(axis=1)
        if return_cache:
            return feat, {"blocks": caches, "final_ln": ln_cache, "num_tokens": x.shape[1]}
        return feat

    def features_from_tokens(self, x0: np.ndarray) -> np.ndarray:
        return self.run_blocks(x0)

    def features(self, frames: np.ndarray) -> np.ndarray:
        return self.run_blocks(self.embed(frames))

    def classify(self, feature: np.ndarray) -> np.ndarray:
        return feature @ self.head["head.W"] + self.head["head.b"]

    def forward(self, frames: np.ndarray) -> np.ndarray:
        return self.classify(self.features(frames))

    def forward_train(self, x0: np.ndarray):
        """Logits from embedded tokens plus the cache needed by :meth:`backward`."""
        feat, cache = self.run_blocks(x0, return_cache=True)
        cache["feat"] = feat
        return self.classify(feat), cache

    # backward --------------------------------------------------------------

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict:
        """Gradients of the trainable tensors given d(loss)/d(logits)."""
        feat = cache["feat"]
        grads = {"head.W": feat.T @ dlogits, "head.b": dlogits.sum(axis=0)}
        adapted = sorted({i for i, _ in self.adapters})
        if not adapted:
            return grads
        dfeat = dlogits @ self.head["head.W"].T
        T = cache["num_tokens"]
        dhf = np.broadcast_to(dfeat[:, None, :] / T, (dfeat.shape[0], T, dfeat.shape[1]))
        dx = _layer_norm_backward(dhf, self.frozen["final_ln.g"], cache["final_ln"])
        for i in range(self.cfg.num_blocks - 1, adapted[0] - 1, -1):
            ca, cm = cache["blocks"][i]
            dx = _mlp_backward(dx, self._blocks[i], cm)
            dx = _attention_backward(dx, self._blocks[i], self.block_adapters(i),
                                     self.cfg.heads, ca, grads, f"block{i}",
                                     input_grad=i > adapted[0])
        return grads

    # parameters ------------------------------------------------------------

    def trainable_parameters(self) -> dict:
        """Live references to every tensor the optimizer may update."""
        params = dict(self.head)
        for (i, p), ad in sorted(self.adapters.items()):
            params[f"block{i}.{p}.A"] = ad.A
            params[f"block{i}.{p}.B"] = ad.B
        return params

    def frozen_param_count(self) -> int:
        return sum(v.size for v in self.frozen.values())

    def head_param_count(self) -> int:
        return sum(v.size for v in self.head.values())

    def frozen_checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.frozen):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.frozen[name], dtype="<f8").tobytes())
        return digest.hexdigest()


def encode(clip, model: PriorNetModel) -> np.ndarray:
    """Mean-pooled feature (length d) of one clip."""
    frames = clip.frames if hasattr(clip, "frames") else clip
    return model.features(frames)[0]


def classify(feature: np.ndarray, model: PriorNetModel) -> np.ndarray:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[-1] != model.cfg.d:
        raise ShapeError(f"feature length {feature.shape[-1]} != d={model.cfg.d}")
    return model.classify(feature)


# -- checkpoint ------------------------------------------------------------

CHECKPOINT_MAGIC = b"PNMD"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: PriorNetModel, path, extra: dict | None = None) -> None:
    """Write ``model`` as magic, version, JSON header, then named float64 blobs."""
    blobs = dict(model.frozen)
    blobs.update(model.head)
    adapters_meta = {}
    for (i, p), ad in sorted(model.adapters.items()):
        blobs[f"block{i}.{p}.A"] = ad.A
        blobs[f"block{i}.{p}.B"] = ad.B
        adapters_meta[f"block{i}.{p}"] = {"r": ad.r, "alpha": ad.alpha}
    header = {
        "config": model.cfg.to_dict(),
        "policy": model.policy.to_dict(),
        "placeholders": model.placeholders,
        "adapters": adapters_meta,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs.items():
            nb = name.encode()
            fh.write(struct.pack("<HB", len(nb), arr.ndim))
            fh.write(nb)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PriorNetModel, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    header = json.loads(data[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    blobs = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", data, off)
        off += 3
        name = data[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        blobs[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    cfg = EncoderConfig.from_dict(header["config"])
    frozen = {k: blobs[k] for k in frozen_param_shapes(cfg)}
    head = {k: blobs[k] for k in head_param_shapes(cfg)}
    adapters = {}
    for key, meta in header["adapters"].items():
        blk, p = key.split(".")
        i = int(blk[len("block"):])
        adapters[(i, p)] = LoraAdapter(A=blobs[key + ".A"], B=blobs[key + ".B"], alpha=float(meta["alpha"]))
    model = PriorNetModel(cfg=cfg, frozen=frozen, head=head, adapters=adapters,
                          policy=PlacementPolicy(**header["policy"]),
                          placeholders=bool(header["placeholders"]))
    return model, header["extra"]
