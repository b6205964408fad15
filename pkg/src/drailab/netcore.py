"""Learnable components: encoders, generator, discriminators, GRL predictors.

The bundle mirrors the training graph: a condition encoder mapping the
supervision vector to a content posterior, an image generator fed a
(style, content) code pair, two parameter-disjoint image encoders producing
the style and content posteriors, up to seven pairwise discriminators, and
the two cross-prediction heads that sit behind gradient reversal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .layers import MLP, Conv2d, ConvTranspose2d, InstanceNorm2d, Linear, Module

MODEL_KINDS = ("DRAI", "DAI", "cInfoGAN", "D-cInfoGAN", "cAVAE", "D-cAVAE")

# components present for each model kind
_COMPONENTS = {
    "DRAI": ("condition_encoder", "image_generator", "style_encoder", "content_encoder",
             "d_x", "d_xt", "d_xz", "d_xc", "d_cycle", "f_z", "f_c"),
    "cInfoGAN": ("condition_encoder", "image_generator", "style_encoder", "d_x", "d_xt"),
    "D-cInfoGAN": ("condition_encoder", "image_generator", "style_encoder",
                   "content_encoder", "d_x", "d_xt"),
    "cAVAE": ("condition_encoder", "image_generator", "style_encoder",
              "d_cycle", "d_xt", "d_xtz"),
    "D-cAVAE": ("condition_encoder", "image_generator", "style_encoder", "content_encoder",
                "d_cycle", "d_xt", "d_xtz", "d_xtc"),
}
_COMPONENTS["DAI"] = _COMPONENTS["DRAI"]

ROLE_ORDER = ("condition_encoder", "image_generator", "style_encoder", "content_encoder",
              "d_x", "d_xt", "d_xz", "d_xc", "d_cycle", "d_xtz", "d_xtc", "f_z", "f_c")

GENERATOR_ROLES = ("condition_encoder", "image_generator", "style_encoder", "content_encoder")
PREDICTOR_ROLES = ("f_z", "f_c")


def canonical_model_kind(name: str) -> str:
    for kind in MODEL_KINDS:
        if name.lower() == kind.lower():
            return kind
    raise ValueError(f"unknown model kind {name!r}; expected one of {MODEL_KINDS}")


def grl_forward(v: np.ndarray) -> np.ndarray:
    """Gradient reversal forward pass: the identity map."""
    return np.asarray(v).copy()


def grl_backward(upstream_grad: np.ndarray) -> np.ndarray:
    """Gradient reversal backward pass: exact negation of the upstream gradient."""
    return -np.asarray(upstream_grad)


class GaussianPosterior:
    """Diagonal Gaussian q(.|.) held as (mean, log-variance) graph nodes."""

    def __init__(self, mean, log_variance, kind: str | None = None):
        self.mean = ad.as_var(mean)
        self.log_variance = ad.as_var(log_variance)
        self.kind = kind
        if self.mean.data.shape != self.log_variance.data.shape:
            raise ValueError("posterior mean/log-variance shapes differ")
        if not (np.isfinite(self.mean.data).all() and np.isfinite(self.log_variance.data).all()):
            raise ValueError("posterior fields must be finite")

    @property
    def dim(self) -> int:
        return self.mean.data.shape[-1]

    def mean_array(self) -> np.ndarray:
        return np.asarray(self.mean.data)


class LatentCode:
    """A style or content code; the kind is fixed at creation."""

    def __init__(self, values, kind: str):
        if kind not in ("style", "content"):
            raise ValueError(f"latent kind must be style or content, got {kind!r}")
        self.values = ad.as_var(values)
        self.kind = kind

    @property
    def dim(self) -> int:
        return self.values.data.shape[-1]


def reparameterize(p: GaussianPosterior, noise, kind: str | None = None) -> LatentCode:
    """Sample mean + exp(log_var / 2) * noise, differentiable in the posterior."""
    noise = ad.as_var(noise)
    if noise.data.shape != p.mean.data.shape:
        raise ValueError("noise shape must match posterior shape")
    values = p.mean + ad.exp(p.log_variance * 0.5) * noise
    kind = kind or p.kind
    if kind is None:
        raise ValueError("posterior has no kind; pass kind= explicitly")
    return LatentCode(values, kind)


@dataclass
class NetConfig:
    image_size: int = 64
    channels: int = 1
    t_dim: int = 6
    d_z: int = 16
    d_c: int = 16
    width: int = 16
    mlp_hidden: int = 64
    dtype: str = "float32"

    def np_dtype(self):
        return np.dtype(self.dtype)


class ImageEncoder(Module):
    """Four strided conv blocks then an affine head to (mean, log-variance)."""

    def __init__(self, cfg: NetConfig, out_dim: int, rng):
        w, dt = cfg.width, cfg.np_dtype()
        self.conv1 = Conv2d(cfg.channels, w, 4, 2, 1, rng, dtype=dt)
        self.conv2 = Conv2d(w, 2 * w, 4, 2, 1, rng, dtype=dt)
        self.norm2 = InstanceNorm2d(2 * w, dtype=dt)
        self.conv3 = Conv2d(2 * w, 4 * w, 4, 2, 1, rng, dtype=dt)
        self.norm3 = InstanceNorm2d(4 * w, dtype=dt)
        self.conv4 = Conv2d(4 * w, 8 * w, 4, 2, 1, rng, dtype=dt)
        self.norm4 = InstanceNorm2d(8 * w, dtype=dt)
        side = cfg.image_size // 16
        self.fc = Linear(8 * w * side * side, 2 * out_dim, rng, dtype=dt)
        self.out_dim = out_dim

    def __call__(self, x: Var):
        h = ad.leaky_relu(self.conv1(x))
        h = ad.leaky_relu(self.norm2(self.conv2(h)))
        h = ad.leaky_relu(self.norm3(self.conv3(h)))
        h = ad.leaky_relu(self.norm4(self.conv4(h)))
        h = ad.reshape(h, (h.shape[0], -1))
        return self.fc(h)


def _split_mean_logvar(out: Var, dim: int) -> tuple[Var, Var]:
    n = out.shape[0]
    full = ad.reshape(out, (n, 2, dim))
    # slicing op: implement with explicit gather through reshape/index
    return _take_half(full, 0), _take_half(full, 1)


def _take_half(v: Var, idx: int) -> Var:
    data = v.data[:, idx, :]

    def vjp(g):
        full = np.zeros_like(v.data)
        full[:, idx, :] = g
        return (full,)

    out = Var(data, requires_grad=v.requires_grad)
    if out.requires_grad:
        out._parents = (v,)
        out._vjp = vjp
    return out


class Generator(Module):
    """Project (z, c) to a 4x4 seed map, then four upsampling blocks to tanh pixels."""

    def __init__(self, cfg: NetConfig, rng):
        w, dt = cfg.width, cfg.np_dtype()
        self.seed_side = cfg.image_size // 16
        self.seed_ch = 8 * w
        self.fc = Linear(cfg.d_z + cfg.d_c, self.seed_ch * self.seed_side ** 2, rng, dtype=dt)
        self.norm0 = InstanceNorm2d(self.seed_ch, dtype=dt)
        self.up1 = ConvTranspose2d(8 * w, 4 * w, 4, 2, 1, rng, dtype=dt)
        self.norm1 = InstanceNorm2d(4 * w, dtype=dt)
        self.up2 = ConvTranspose2d(4 * w, 2 * w, 4, 2, 1, rng, dtype=dt)
        self.norm2 = InstanceNorm2d(2 * w, dtype=dt)
        self.up3 = ConvTranspose2d(2 * w, w, 4, 2, 1, rng, dtype=dt)
        self.norm3 = InstanceNorm2d(w, dtype=dt)
        self.up4 = ConvTranspose2d(w, cfg.channels, 4, 2, 1, rng, dtype=dt)

    def __call__(self, zc: Var):
        h = self.fc(zc)
        h = ad.reshape(h, (h.shape[0], self.seed_ch, self.seed_side, self.seed_side))
        h = ad.leaky_relu(self.norm0(h))
        h = ad.leaky_relu(self.norm1(self.up1(h)))
        h = ad.leaky_relu(self.norm2(self.up2(h)))
        h = ad.leaky_relu(self.norm3(self.up3(h)))
        return ad.tanh(self.up4(h))


class ScoreNet(Module):
    """Unconditional discriminator: conv stack to a scalar score per item."""

    def __init__(self, cfg: NetConfig, cin: int, rng):
        w, dt = cfg.width, cfg.np_dtype()
        self.conv1 = Conv2d(cin, w, 4, 2, 1, rng, dtype=dt)
        self.conv2 = Conv2d(w, 2 * w, 4, 2, 1, rng, dtype=dt)
        self.norm2 = InstanceNorm2d(2 * w, dtype=dt)
        self.conv3 = Conv2d(2 * w, 4 * w, 4, 2, 1, rng, dtype=dt)
        self.norm3 = InstanceNorm2d(4 * w, dtype=dt)
        self.conv4 = Conv2d(4 * w, 8 * w, 4, 2, 1, rng, dtype=dt)
        self.norm4 = InstanceNorm2d(8 * w, dtype=dt)
        side = cfg.image_size // 16
        self.fc = Linear(8 * w * side * side, 1, rng, dtype=dt)

    def __call__(self, x: Var):
        h = ad.leaky_relu(self.conv1(x))
        h = ad.leaky_relu(self.norm2(self.conv2(h)))
        h = ad.leaky_relu(self.norm3(self.conv3(h)))
        h = ad.leaky_relu(self.norm4(self.conv4(h)))
        h = ad.reshape(h, (h.shape[0], -1))
        return ad.reshape(self.fc(h), (h.shape[0],))


class PairScoreNet(Module):
    """Joint discriminator: the vector input is tiled onto a mid-level feature map."""

    def __init__(self, cfg: NetConfig, cond_dim: int, rng):
        w, dt = cfg.width, cfg.np_dtype()
        self.cond_dim = cond_dim
        self.conv1 = Conv2d(cfg.channels, w, 4, 2, 1, rng, dtype=dt)
        self.conv2 = Conv2d(w, 2 * w, 4, 2, 1, rng, dtype=dt)
        self.norm2 = InstanceNorm2d(2 * w, dtype=dt)
        self.conv3 = Conv2d(2 * w + cond_dim, 4 * w, 4, 2, 1, rng, dtype=dt)
        self.norm3 = InstanceNorm2d(4 * w, dtype=dt)
        self.conv4 = Conv2d(4 * w, 8 * w, 4, 2, 1, rng, dtype=dt)
        self.norm4 = InstanceNorm2d(8 * w, dtype=dt)
        side = cfg.image_size // 16
        self.fc = Linear(8 * w * side * side, 1, rng, dtype=dt)

    def __call__(self, x: Var, cond: Var):
        if cond.shape[-1] != self.cond_dim:
            raise ValueError(f"conditioning dim {cond.shape[-1]} != expected {self.cond_dim}")
        h = ad.leaky_relu(self.conv1(x))
        h = ad.leaky_relu(self.norm2(self.conv2(h)))
        tiled = ad.tile_spatial(cond, h.shape[2], h.shape[3])
        h = ad.concat([h, tiled], axis=1)
        h = ad.leaky_relu(self.norm3(self.conv3(h)))
        h = ad.leaky_relu(self.norm4(self.conv4(h)))
        h = ad.reshape(h, (h.shape[0], -1))
        return ad.reshape(self.fc(h), (h.shape[0],))


class CondEncoder(Module):
    """Condition vector to content posterior, a two-layer perceptron."""

    def __init__(self, cfg: NetConfig, rng):
        self.net = MLP(cfg.t_dim, cfg.mlp_hidden, 2 * cfg.d_c, rng, dtype=cfg.np_dtype())
        self.d_c = cfg.d_c

    def __call__(self, t: Var) -> tuple[Var, Var]:
        return _split_mean_logvar(self.net(t), self.d_c)


class PosteriorEncoder(Module):
    """Image to one diagonal-Gaussian posterior over a single code."""

    def __init__(self, cfg: NetConfig, out_dim: int, rng):
        self.enc = ImageEncoder(cfg, out_dim, rng)
        self.out_dim = out_dim

    def __call__(self, x: Var) -> tuple[Var, Var]:
        return _split_mean_logvar(self.enc(x), self.out_dim)


class ComponentBundle:
    """All learnable pieces for one model kind, with role-grouped parameters."""

    def __init__(self, cfg: NetConfig, model_kind: str = "DRAI", seed: int = 0):
        self.cfg = cfg
        self.model_kind = canonical_model_kind(model_kind)
        rng = np.random.default_rng(seed)
        roles = _COMPONENTS[self.model_kind]
        self.components: dict[str, Module] = {}
        for role in ROLE_ORDER:
            if role not in roles:
                continue
            self.components[role] = self._build(role, cfg, rng)

    def _build(self, role: str, cfg: NetConfig, rng) -> Module:
        dt = cfg.np_dtype()
        if role == "condition_encoder":
            return CondEncoder(cfg, rng)
        if role == "image_generator":
            return Generator(cfg, rng)
        if role == "style_encoder":
            return PosteriorEncoder(cfg, cfg.d_z, rng)
        if role == "content_encoder":
            return PosteriorEncoder(cfg, cfg.d_c, rng)
        if role == "d_x":
            return ScoreNet(cfg, cfg.channels, rng)
        if role == "d_cycle":
            return ScoreNet(cfg, 2 * cfg.channels, rng)
        if role == "d_xt":
            return PairScoreNet(cfg, cfg.t_dim, rng)
        if role == "d_xz":
            return PairScoreNet(cfg, cfg.d_z, rng)
        if role == "d_xc":
            return PairScoreNet(cfg, cfg.d_c, rng)
        if role == "d_xtz":
            return PairScoreNet(cfg, cfg.t_dim + cfg.d_z, rng)
        if role == "d_xtc":
            return PairScoreNet(cfg, cfg.t_dim + cfg.d_c, rng)
        if role == "f_z":
            return MLP(cfg.d_c, cfg.mlp_hidden, cfg.d_z, rng, dtype=dt)
        if role == "f_c":
            return MLP(cfg.d_z, cfg.mlp_hidden, cfg.d_c, rng, dtype=dt)
        raise KeyError(role)

    # ------------------------------------------------------------------
    # parameter access
    # ------------------------------------------------------------------
    def named_parameters(self):
        for role, comp in self.components.items():
            yield from comp.named_parameters(prefix=f"{role}/")

    def parameter_groups(self) -> dict[str, list[Var]]:
        groups: dict[str, list[Var]] = {"generators": [], "discriminators": [], "predictors": []}
        for role, comp in self.components.items():
            if role in GENERATOR_ROLES:
                groups["generators"].extend(comp.parameters())
            elif role in PREDICTOR_ROLES:
                groups["predictors"].extend(comp.parameters())
            else:
                groups["discriminators"].extend(comp.parameters())
        return groups

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ValueError(f"checkpoint parameter names do not match bundle: {missing[:4]}...")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} vs bundle {p.data.shape}"
                )
            p.data = arr.copy()

    # ------------------------------------------------------------------
    # forward operations
    # ------------------------------------------------------------------
    def _as_image_var(self, x) -> Var:
        x = ad.as_var(x)
        n = x.data.shape[0]
        hw, c = self.cfg.image_size, self.cfg.channels
        if x.data.shape[1:] != (c, hw, hw):
            raise ValueError(f"image batch shape {x.data.shape} != (N, {c}, {hw}, {hw})")
        return x

    def encode_condition(self, t) -> GaussianPosterior:
        t = ad.as_var(t)
        if t.data.shape[-1] != self.cfg.t_dim:
            raise ValueError(f"conditioning dim {t.data.shape[-1]} != profile dim {self.cfg.t_dim}")
        mean, logvar = self.components["condition_encoder"](t)
        return GaussianPosterior(mean, logvar, kind="content")

    def infer_codes(self, x) -> tuple[GaussianPosterior, GaussianPosterior]:
        x = self._as_image_var(x)
        mz, lz = self.components["style_encoder"](x)
        post_z = GaussianPosterior(mz, lz, kind="style")
        if "content_encoder" in self.components:
            mc, lc = self.components["content_encoder"](x)
            post_c = GaussianPosterior(mc, lc, kind="content")
        else:
            raise ValueError(f"model kind {self.model_kind} has no content encoder")
        return post_z, post_c

    def infer_style(self, x) -> GaussianPosterior:
        x = self._as_image_var(x)
        mz, lz = self.components["style_encoder"](x)
        return GaussianPosterior(mz, lz, kind="style")

    def generate_image(self, z: LatentCode, c: LatentCode) -> Var:
        if z.kind != "style" or c.kind != "content":
            raise ValueError(f"generate_image expects (style, content), got ({z.kind}, {c.kind})")
        if z.dim != self.cfg.d_z or c.dim != self.cfg.d_c:
            raise ValueError("latent dims do not match configuration")
        zc = ad.concat([z.values, c.values], axis=1)
        return self.components["image_generator"](zc)

    def discriminate(self, name: str, *inputs) -> Var:
        if name not in self.components:
            raise ValueError(f"no discriminator {name!r} in model kind {self.model_kind}")
        net = self.components[name]
        if name == "d_x":
            (x,) = inputs
            return net(self._as_image_var(x))
        if name == "d_cycle":
            x, x2 = inputs
            pair = ad.concat([self._as_image_var(x), self._as_image_var(x2)], axis=1)
            return net(pair)
        if name in ("d_xt", "d_xz", "d_xc"):
            x, v = inputs
            return net(self._as_image_var(x), ad.as_var(v))
        if name in ("d_xtz", "d_xtc"):
            x, t, code = inputs
            cond = ad.concat([ad.as_var(t), ad.as_var(code)], axis=1)
            return net(self._as_image_var(x), cond)
        raise ValueError(f"unknown discriminator {name!r}")

    def predict_across(self, name: str, code: LatentCode) -> LatentCode:
        """Cross-prediction through a gradient-reversal node."""
        if name == "f_z":
            if code.kind != "content":
                raise ValueError("f_z predicts style from a content code")
            out_kind = "style"
        elif name == "f_c":
            if code.kind != "style":
                raise ValueError("f_c predicts content from a style code")
            out_kind = "content"
        else:
            raise ValueError(f"unknown predictor {name!r}")
        net = self.components[name]
        return LatentCode(net(ad.grl(code.values)), out_kind)

    # ------------------------------------------------------------------
    # numpy-in / numpy-out conveniences for evaluation and generation
    # ------------------------------------------------------------------
    def infer_code_means(self, x: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Posterior-mean codes for an (N, C, H, W) array; returns (Z, C)."""
        zs, cs = [], []
        with ad.no_grad():
            for lo in range(0, len(x), batch):
                post_z, post_c = self.infer_codes(x[lo:lo + batch])
                zs.append(post_z.mean_array())
                cs.append(post_c.mean_array())
        return np.concatenate(zs), np.concatenate(cs)

    def decode_codes(self, z: np.ndarray, c: np.ndarray, batch: int = 256) -> np.ndarray:
        """Generate (N, C, H, W) images from plain code arrays."""
        outs = []
        dt = self.cfg.np_dtype()
        with ad.no_grad():
            for lo in range(0, len(z), batch):
                img = self.generate_image(
                    LatentCode(z[lo:lo + batch].astype(dt), "style"),
                    LatentCode(c[lo:lo + batch].astype(dt), "content"))
                outs.append(np.asarray(img.data))
        return np.concatenate(outs)
