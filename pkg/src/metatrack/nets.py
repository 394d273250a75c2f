"""Toy siamese tracking/segmentation model.

Shared convolutional backbone, channel-wise correlation, three two-layer
fully-convolutional heads (classification, box regression, mask), and a
small two-layer perceptron that turns a box prior into a soft mask label.
Batch-norm is replaced by per-channel affine (scale, shift) parameters,
which is evaluation-mode behaviour without running statistics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class NetConfig:
    template_size: int = 32
    search_size: int = 64
    backbone_channels: tuple = (1, 8, 16, 16, 16)
    backbone_strides: tuple = (2, 1, 2, 1)
    feat_channels: int = 16
    anchors: int = 1
    anchor_size: float = 16.0
    mask_grid: int = 16
    gen_hidden: int = 16
    generator_offsets: bool = True
    # Initial affine scale of the mask head.  The output conv is initialized
    # 1/sharpness smaller so the initial function is unchanged, but gradients
    # (and curvature) along the adapted output weights grow with sharpness,
    # which is what makes the small, fixed online-adaptation step size
    # actually move the mask predictions within a 20-step budget.
    mask_sharpness: float = 60.0
    # Generator init: a monotone map of the Gaussian prior channel, so the
    # initial in-box labels form a graded elliptical soft mask (confident at
    # the target center, weak at the box corners) instead of an arbitrary
    # near-0.5 blob.  Labels near 0.5 sit exactly on the mask decision
    # threshold, and adapting toward them drags mask probabilities onto the
    # boundary and destroys the extent estimates; a graded profile also
    # rate-limits adaptation at the corners, keeping adapted masks
    # shape-faithful.
    gen_prior_gain: float = 2.0
    gen_out_gain: float = 4.0
    gen_bias: float = 1.0

    @property
    def score_size(self):
        # valid correlation of template features over search features
        zf = self.template_size // 4
        xf = self.search_size // 4
        return xf - zf + 1

    @property
    def feat_stride(self):
        return 4


@dataclass
class ModelParams:
    """Slow weights: backbone, three heads, and the label generator."""

    theta: dict
    phi: dict
    rho: dict
    omega: dict
    zeta: dict
    cfg: NetConfig = field(default_factory=NetConfig)

    def heads(self):
        return {"phi": self.phi, "rho": self.rho, "omega": self.omega}

    def named_params(self):
        out = {}
        for group in ("theta", "phi", "rho", "omega", "zeta"):
            for k, v in getattr(self, group).items():
                out[f"{group}.{k}"] = v
        return out

    def clone(self):
        def cp(d):
            return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in d.items()}
        return ModelParams(cp(self.theta), cp(self.phi), cp(self.rho),
                           cp(self.omega), cp(self.zeta), self.cfg)


@dataclass
class FastWeights:
    """Task-adapted copies of the head parameters."""

    phi: dict
    rho: dict
    omega: dict
    graph_attached: bool = False

    def heads(self):
        return {"phi": self.phi, "rho": self.rho, "omega": self.omega}


def _conv_init(rng, cout, cin, k, gain=1.0):
    std = gain / np.sqrt(cin * k * k)
    return Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)


def _head_params(rng, cin, cout, sharpness=1.0):
    return {
        "conv1.w": _conv_init(rng, cin, cin, 3),
        "aff.s": Tensor(np.full(cin, float(sharpness)), requires_grad=True),
        "aff.t": Tensor(np.zeros(cin), requires_grad=True),
        "conv2.w": _conv_init(rng, cout, cin, 1, gain=1.0 / sharpness),
        "conv2.b": Tensor(np.zeros(cout), requires_grad=True),
    }


def init_model(cfg=None, seed=0):
    cfg = cfg or NetConfig()
    rng = np.random.default_rng(seed)
    ch = cfg.backbone_channels
    theta = {}
    for i in range(4):
        theta[f"conv{i+1}.w"] = _conv_init(rng, ch[i + 1], ch[i], 3)
        theta[f"aff{i+1}.s"] = Tensor(np.ones(ch[i + 1]), requires_grad=True)
        theta[f"aff{i+1}.t"] = Tensor(np.zeros(ch[i + 1]), requires_grad=True)
    c = cfg.feat_channels
    phi = _head_params(rng, c, cfg.anchors)
    rho = _head_params(rng, c, 4 * cfg.anchors)
    omega = _head_params(rng, c, cfg.mask_grid ** 2,
                         sharpness=cfg.mask_sharpness)
    gin = 3 if cfg.generator_offsets else 1
    w1 = rng.normal(0.0, 0.1, (gin, cfg.gen_hidden))
    w1[0, :] += cfg.gen_prior_gain
    w2 = rng.normal(0.0, 0.1, (cfg.gen_hidden, 1))
    w2[:, 0] += cfg.gen_out_gain / cfg.gen_hidden
    zeta = {
        "w1": Tensor(w1, requires_grad=True),
        "b1": Tensor(np.zeros(cfg.gen_hidden), requires_grad=True),
        "w2": Tensor(w2, requires_grad=True),
        "b2": Tensor(np.full(1, cfg.gen_bias), requires_grad=True),
    }
    return ModelParams(theta, phi, rho, omega, zeta, cfg)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _affine(x, s, t):
    c = s.shape[0]
    sh = (1, c, 1, 1)
    return ad.add(ad.mul(x, ad.broadcast_to(ad.reshape(s, sh), x.shape)),
                  ad.broadcast_to(ad.reshape(t, sh), x.shape))


def _bias(x, b):
    c = b.shape[0]
    return ad.add(x, ad.broadcast_to(ad.reshape(b, (1, c, 1, 1)), x.shape))


def backbone_forward(theta, image):
    """Encode one (1,H,W) image or a (N,1,H,W) batch to feature blocks."""
    squeeze = image.data.ndim == 3
    x = ad.reshape(image, (1,) + image.shape) if squeeze else image
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"backbone_forward: expected (N,1,H,W), got {image.shape}")
    strides = (2, 1, 2, 1)
    for i in range(4):
        x = ad.conv2d(x, theta[f"conv{i+1}.w"], stride=strides[i], pad=1)
        x = _affine(x, theta[f"aff{i+1}.s"], theta[f"aff{i+1}.t"])
        if i < 3:
            x = ad.relu(x)
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


def channel_correlation(z_feat, x_feat):
    """Per-channel valid cross-correlation of template over search features."""
    if z_feat.shape[-3] != x_feat.shape[-3]:
        raise ValueError(
            f"channel_correlation: channel mismatch {z_feat.shape} vs {x_feat.shape}")
    return ad.depthwise_xcorr(z_feat, x_feat)


def _head_forward(params, r):
    x = ad.conv2d(r, params["conv1.w"], stride=1, pad=1)
    x = _affine(x, params["aff.s"], params["aff.t"])
    x = ad.relu(x)
    x = ad.conv2d(x, params["conv2.w"], stride=1, pad=0)
    return _bias(x, params["conv2.b"])


def heads_forward(heads, r):
    """Run the three heads on a shared correlation block ``r``.

    ``heads`` maps {"phi","rho","omega"} to their parameter dicts (slow or
    fast).  ``r`` is (C,S,S) or (N,C,S,S); outputs follow the same batching.
    """
    squeeze = r.data.ndim == 3
    rb = ad.reshape(r, (1,) + r.shape) if squeeze else r
    score = _head_forward(heads["phi"], rb)
    box = _head_forward(heads["rho"], rb)
    mask = _head_forward(heads["omega"], rb)
    if squeeze:
        score = ad.reshape(score, score.shape[1:])
        box = ad.reshape(box, box.shape[1:])
        mask = ad.reshape(mask, mask.shape[1:])
    return score, box, mask


def generator_forward(zeta, prior):
    """Per-pixel 2-layer perceptron over the prior channels, sigmoid output.

    ``prior`` is (gin, n, n); returns an (n, n) map with entries in (0, 1).
    """
    gin = zeta["w1"].shape[0]
    if prior.data.ndim != 3 or prior.shape[0] != gin:
        raise ValueError(f"generator_forward: expected ({gin},n,n), got {prior.shape}")
    n = prior.shape[1]
    x = ad.transpose(ad.reshape(prior, (gin, n * n)), (1, 0))
    h = ad.tanh(ad.add(ad.matmul(x, zeta["w1"]),
                       ad.broadcast_to(ad.reshape(zeta["b1"], (1, -1)), (n * n, zeta["b1"].shape[0]))))
    o = ad.add(ad.matmul(h, zeta["w2"]),
               ad.broadcast_to(ad.reshape(zeta["b2"], (1, 1)), (n * n, 1)))
    return ad.reshape(ad.sigmoid(o), (n, n))


# ---------------------------------------------------------------------------
# checkpoint i/o (magic "MTCK")
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    params = model.named_params()
    with open(path, "wb") as fh:
        fh.write(b"MTCK")
        fh.write(struct.pack("<B", 1))
        for name in sorted(params):
            t = params[name]
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", t.data.ndim))
            for d in t.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, cfg=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"MTCK":
        raise ValueError(f"checkpoint: bad magic {blob[:4]!r}")
    if blob[4] != 1:
        raise ValueError(f"checkpoint: unsupported version {blob[4]}")
    off = 5
    groups = {"theta": {}, "phi": {}, "rho": {}, "omega": {}, "zeta": {}}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        rank = blob[off]
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        group, key = name.split(".", 1)
        groups[group][key] = Tensor(data.copy(), requires_grad=True)
    return ModelParams(cfg=cfg or NetConfig(), **groups)
