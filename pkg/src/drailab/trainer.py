"""Minimax training loop: alternating discriminator/generator updates, the
double-pass self-supervision schedule, baseline wiring, and bit-exact
checkpoint/resume.

Every random draw a run makes (batch indices, prior noise, reparameterization
noise, transform choices, mismatch partners) comes from one generator owned by
the train state and consumed in a fixed order, which is what makes loss traces
a pure function of (seed, config).
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio, objectives
from .autodiff import Var
from .errors import CheckpointError, ConfigurationError, NonFiniteLossError
from .netcore import (ComponentBundle, GaussianPosterior, LatentCode, NetConfig,
                      canonical_model_kind, reparameterize)
from .objectives import AblationFlags, LossBreakdown

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    profile: str = "synthetic"
    model_kind: str = "DRAI"
    flags: AblationFlags | None = None   # None -> defaults for the model kind
    d_z: int = 16
    d_c: int = 16
    width: int = 16
    batch_size: int = 32
    steps: int = 20000
    learning_rate: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    eval_every: int = 1000
    out_dir: str = "runs/run"
    lam_kl: float = 1.0
    margin: float = 1.0
    lambda_info: float = 1.0
    dali_content_prior: str = "posterior"   # decoder-joint content source for d_xc
    second_pass: bool = True                # train each batch twice (orig + transformed)
    second_pass_adversarial: bool = True    # recompute adversarial losses on the transformed pass
    image_cycle_l1: bool = False            # l1 fallback instead of the cycle discriminator
    data_dir: str | None = None             # persisted dataset directory (else synthetic)
    synthetic: dict = field(default_factory=dict)  # SyntheticSpec overrides

    def __post_init__(self):
        self.model_kind = canonical_model_kind(self.model_kind)
        if isinstance(self.flags, dict):
            self.flags = AblationFlags(**self.flags)
        elif self.flags is None:
            self.flags = AblationFlags.for_model_kind(self.model_kind)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 2 or self.steps < 0 or self.d_z <= 0 or self.d_c <= 0:
            raise ConfigurationError("counts must be positive (batch >= 2, steps >= 0)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.profile not in ("synthetic", "lidc", "ham"):
            raise ConfigurationError(f"unknown dataset profile {self.profile!r}")
        if self.dali_content_prior not in ("posterior", "prior"):
            raise ConfigurationError("dali_content_prior must be 'posterior' or 'prior'")
        if self.model_kind == "DRAI" and not all(self.flags.as_dict().values()):
            log.warning("model kind DRAI forces all ablation flags on")
            self.flags = AblationFlags(True, True, True)
        if self.model_kind not in ("DRAI", "DAI") and any(self.flags.as_dict().values()):
            raise ConfigurationError("ablation flags apply only to the DRAI/DAI family")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["flags"] = self.flags.as_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        """Semantic hash guarding resume; excludes the run location and the
        step horizon so an interrupted or extended run can continue."""
        data = self.to_dict()
        data.pop("out_dir", None)
        data.pop("steps", None)
        return hashlib.sha256(
            json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


def config_hash_of(data: dict) -> str:
    """Hash of a raw config mapping, stable under key reordering."""
    return ExperimentConfig.from_dict(data).config_hash()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with per-parameter slots; parameters without gradients are skipped."""

    def __init__(self, params: list[Var], lr: float, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[i], self.v[i]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= self.lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise CheckpointError("optimizer slot count mismatch")
        self.t = int(state["t"])
        self.m = [np.asarray(a).copy() for a in state["m"]]
        self.v = [np.asarray(a).copy() for a in state["v"]]


# ---------------------------------------------------------------------------
# train state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    bundle: ComponentBundle
    opt_d: Adam
    opt_g: Adam
    rng: np.random.Generator
    mismatch: dataio.MismatchSampler

    def snapshot(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.bundle.state_dict().items()},
            "opt_d": self.opt_d.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "rng": self.rng.bit_generator.state,
            "res_images": [a.copy() for a in self.mismatch._res_images],
            "res_keys": list(self.mismatch._res_keys),
        }

    def restore(self, snap: dict) -> None:
        self.bundle.load_state_dict(snap["params"])
        self.opt_d.load_state_dict(snap["opt_d"])
        self.opt_g.load_state_dict(snap["opt_g"])
        self.rng.bit_generator.state = snap["rng"]
        self.mismatch._res_images = [a.copy() for a in snap["res_images"]]
        self.mismatch._res_keys = list(snap["res_keys"])


def init_train_state(config: ExperimentConfig, net_cfg: NetConfig) -> TrainState:
    bundle = ComponentBundle(net_cfg, config.model_kind, seed=config.seed)
    groups = bundle.parameter_groups()
    opt_d = Adam(groups["discriminators"], config.learning_rate, config.beta1, config.beta2)
    opt_g = Adam(groups["generators"] + groups["predictors"], config.learning_rate,
                 config.beta1, config.beta2)
    rng = np.random.default_rng([config.seed, 1])
    return TrainState(0, bundle, opt_d, opt_g, rng, dataio.MismatchSampler(rng))


def _zero_all(state: TrainState) -> None:
    for _, p in state.bundle.named_parameters():
        p.grad = None


def _check_finite(components: dict) -> None:
    for name, value in components.items():
        if value is None:
            continue
        val = float(value.data) if isinstance(value, Var) else float(value)
        if not np.isfinite(val):
            raise NonFiniteLossError(name, val)


def _noise(state: TrainState, shape, dtype) -> np.ndarray:
    return state.rng.standard_normal(shape).astype(dtype)


# ---------------------------------------------------------------------------
# one optimization pass for the dual-inference family
# ---------------------------------------------------------------------------

def _dual_pass(state: TrainState, x: np.ndarray, t: np.ndarray,
               config: ExperimentConfig, flags: AblationFlags,
               x_anchor: np.ndarray | None) -> LossBreakdown:
    """One D-update plus one G-update on batch (x, t); x_anchor is the
    untransformed batch when the self term is active this pass.

    Calls into each network are batched (real and generated rows stacked along
    the batch axis, scores split afterwards) so every conv runs once per phase.
    """
    bundle = state.bundle
    dt = bundle.cfg.np_dtype()
    n = x.shape[0]
    d_z, d_c = bundle.cfg.d_z, bundle.cfg.d_c
    xv = Var(x)
    tv = Var(t)

    mis, mask = state.mismatch(x, t)
    m = int(mask.sum())
    if m == 0:
        log.warning("no usable mismatched pairs in batch; dropping the mismatch term")
    use_l1_cycle = config.image_cycle_l1

    def draw_codes(q_ct, q_z, q_c):
        c_t = reparameterize(q_ct, _noise(state, (n, d_c), dt))
        z_p = _noise(state, (n, d_z), dt)
        z_hat = reparameterize(q_z, _noise(state, (n, d_z), dt))
        c_hat = reparameterize(q_c, _noise(state, (n, d_c), dt))
        if config.dali_content_prior == "posterior":
            c_dec = c_t.values
        else:
            c_dec = Var(_noise(state, (n, d_c), dt))
        return c_t, z_p, z_hat, c_hat, c_dec

    def generate_pair(z_p, c_t, z_hat, c_hat):
        """One generator forward over [(prior z, cond c); (inferred z, c)]."""
        z_all = ad.concat([Var(z_p), z_hat.values], axis=0)
        c_all = ad.concat([c_t.values, c_hat.values], axis=0)
        pair = bundle.generate_image(LatentCode(z_all, "style"), LatentCode(c_all, "content"))
        return ad.split_rows(pair, (n, n))

    # --- discriminator phase: generator outputs detached -------------------
    _zero_all(state)
    with ad.no_grad():
        q_ct = bundle.encode_condition(tv)
        q_z, q_c = bundle.infer_codes(xv)
        c_t, z_p, z_hat, c_hat, c_dec = draw_codes(q_ct, q_z, q_c)
        x_tilde, x_rec = generate_pair(z_p, c_t, z_hat, c_hat)

    if m:
        xt_imgs = Var(np.concatenate([x, x_tilde.data, mis[mask]]))
        xt_conds = Var(np.concatenate([t, t, t[mask]]))
    else:
        xt_imgs = Var(np.concatenate([x, x_tilde.data]))
        xt_conds = Var(np.concatenate([t, t]))
    s_xt = ad.split_rows(bundle.discriminate("d_xt", xt_imgs, xt_conds), (n, n, m))
    s_x = ad.split_rows(
        bundle.discriminate("d_x", Var(np.concatenate([x, x_tilde.data]))), (n, n))
    t2i_d = objectives.loss_t2i(s_x[0], s_x[1], s_xt[0], s_xt[2] if m else None,
                                s_xt[1], side="D")

    ali_imgs = Var(np.concatenate([x, x_tilde.data]))
    s_xz = ad.split_rows(bundle.discriminate(
        "d_xz", ali_imgs, ad.concat([z_hat.values, Var(z_p)], axis=0)), (n, n))
    s_xc = ad.split_rows(bundle.discriminate(
        "d_xc", ali_imgs, ad.concat([c_hat.values, c_dec], axis=0)), (n, n))
    dali_d = objectives.loss_dali(
        {"enc_z": s_xz[0], "dec_z": s_xz[1], "enc_c": s_xc[0], "dec_c": s_xc[1]}, side="D")

    if use_l1_cycle:
        cyc_d = Var(np.asarray(0.0, dtype=dt))
    else:
        pairs = Var(np.concatenate([np.concatenate([x, x], axis=1),
                                    np.concatenate([x, x_rec.data], axis=1)]))
        s_cyc = ad.split_rows(bundle.components["d_cycle"](pairs), (n, n))
        cyc_d = objectives.loss_image_cycle(s_cyc[0], s_cyc[1], side="D")

    _check_finite({"t2i_D": t2i_d, "dali_D": dali_d, "image_cycle_D": cyc_d})
    (t2i_d + dali_d + cyc_d).backward()
    state.opt_d.step()
    d_floats = {"t2i_D": float(t2i_d.data), "dali_D": float(dali_d.data),
                "image_cycle_D": float(cyc_d.data)}

    # --- generator phase: fresh graph, discriminators frozen ---------------
    _zero_all(state)
    with ad.frozen(state.opt_d.params):
        if flags.selfReg and x_anchor is None:
            raise ConfigurationError("self term needs the untransformed anchor batch")
        q_ct = bundle.encode_condition(tv)
        if flags.selfReg:
            # encode the current batch and its untransformed anchor in one forward
            both = Var(np.concatenate([x, x_anchor]))
            q_z_b, q_c_b = bundle.infer_codes(both)
            mz, mz0 = ad.split_rows(q_z_b.mean, (n, n))
            lz, lz0 = ad.split_rows(q_z_b.log_variance, (n, n))
            mc, mc0 = ad.split_rows(q_c_b.mean, (n, n))
            lc, lc0 = ad.split_rows(q_c_b.log_variance, (n, n))
            q_z = GaussianPosterior(mz, lz, kind="style")
            q_c = GaussianPosterior(mc, lc, kind="content")
            q_z0 = GaussianPosterior(mz0, lz0, kind="style")
            q_c0 = GaussianPosterior(mc0, lc0, kind="content")
        else:
            q_z, q_c = bundle.infer_codes(xv)
        c_t, z_p, z_hat, c_hat, c_dec = draw_codes(q_ct, q_z, q_c)
        x_tilde, x_rec = generate_pair(z_p, c_t, z_hat, c_hat)

        components: dict = dict(d_floats)
        components["t2i_G"] = objectives.loss_t2i(
            None, bundle.discriminate("d_x", x_tilde), None, None,
            bundle.discriminate("d_xt", x_tilde, tv), side="G")
        ali_imgs = ad.concat([xv, x_tilde], axis=0)
        s_xz = ad.split_rows(bundle.discriminate(
            "d_xz", ali_imgs, ad.concat([z_hat.values, Var(z_p)], axis=0)), (n, n))
        s_xc = ad.split_rows(bundle.discriminate(
            "d_xc", ali_imgs, ad.concat([c_hat.values, c_dec], axis=0)), (n, n))
        components["dali_G"] = objectives.loss_dali(
            {"enc_z": s_xz[0], "dec_z": s_xz[1], "enc_c": s_xc[0], "dec_c": s_xc[1]}, side="G")
        if use_l1_cycle:
            components["image_cycle_G"] = ad.mean_abs(x_rec, xv)
        else:
            components["image_cycle_G"] = objectives.loss_image_cycle(
                None, bundle.discriminate("d_cycle", xv, x_rec), side="G")
        components["kl_z"] = objectives.kl_standard_normal(q_z)
        components["kl_cx"] = objectives.kl_standard_normal(q_c)
        components["kl_ct"] = objectives.kl_standard_normal(q_ct)
        if flags.featureCycle:
            q_zp, q_cp = bundle.infer_codes(x_tilde)
            z_prime = reparameterize(q_zp, _noise(state, (n, d_z), dt))
            c_prime = reparameterize(q_cp, _noise(state, (n, d_c), dt))
            components["code_cycle"] = objectives.loss_code_cycle(
                Var(z_p), c_t.values, z_prime.values, c_prime.values)
        if flags.MIReg:
            components["grl"] = objectives.loss_grl(
                z_hat.values, c_hat.values,
                bundle.components["f_z"], bundle.components["f_c"])
        if flags.selfReg:
            z0 = reparameterize(q_z0, _noise(state, (n, d_z), dt))
            c0 = reparameterize(q_c0, _noise(state, (n, d_c), dt))
            components["self_reg"] = objectives.loss_self(
                c0.values, c_hat.values, z0.values, z_hat.values, margin=config.margin)

        breakdown = objectives.full_objective(components, flags, lam=config.lam_kl)
        _check_finite(components)
        breakdown.total_G.backward()
        state.opt_g.step()
    return breakdown


def _self_only_pass(state: TrainState, x_anchor: np.ndarray, x_prime: np.ndarray,
                    config: ExperimentConfig) -> LossBreakdown:
    """Second pass restricted to the self term (generator update only)."""
    bundle = state.bundle
    dt = bundle.cfg.np_dtype()
    n = x_anchor.shape[0]
    d_z, d_c = bundle.cfg.d_z, bundle.cfg.d_c
    _zero_all(state)
    q_z0, q_c0 = bundle.infer_codes(Var(x_anchor))
    z0 = reparameterize(q_z0, _noise(state, (n, d_z), dt))
    c0 = reparameterize(q_c0, _noise(state, (n, d_c), dt))
    q_z2, q_c2 = bundle.infer_codes(Var(x_prime))
    z2 = reparameterize(q_z2, _noise(state, (n, d_z), dt))
    c2 = reparameterize(q_c2, _noise(state, (n, d_c), dt))
    self_reg = objectives.loss_self(c0.values, c2.values, z0.values, z2.values,
                                    margin=config.margin)
    _check_finite({"self_reg": self_reg})
    self_reg.backward()
    state.opt_g.step()
    return LossBreakdown(self_reg=float(self_reg.data), total_G=float(self_reg.data))


# ---------------------------------------------------------------------------
# baseline passes
# ---------------------------------------------------------------------------

def _infogan_pass(state: TrainState, x: np.ndarray, t: np.ndarray,
                  config: ExperimentConfig) -> LossBreakdown:
    bundle = state.bundle
    dt = bundle.cfg.np_dtype()
    n = x.shape[0]
    xv = Var(x)
    dual = bundle.model_kind == "D-cInfoGAN"

    _zero_all(state)
    with ad.no_grad():
        c_t = LatentCode(bundle.encode_condition(t).mean, "content")
        z_p = _noise(state, (n, bundle.cfg.d_z), dt)
        x_tilde = bundle.generate_image(LatentCode(z_p, "style"), c_t)
    d_scores = {
        "real": bundle.discriminate("d_x", xv),
        "fake": bundle.discriminate("d_x", x_tilde),
        "matched": bundle.discriminate("d_xt", xv, Var(t)),
        "fake_matched": bundle.discriminate("d_xt", x_tilde, Var(t)),
    }
    d_loss = objectives.loss_infogan(d_scores, None, None, side="D")
    _check_finite({"t2i_D": d_loss})
    d_loss.backward()
    state.opt_d.step()

    _zero_all(state)
    c_t = LatentCode(bundle.encode_condition(t).mean, "content")
    z_p = _noise(state, (n, bundle.cfg.d_z), dt)
    x_tilde = bundle.generate_image(LatentCode(z_p, "style"), c_t)
    q_z = bundle.infer_style(x_tilde)
    g_scores = {
        "fake": bundle.discriminate("d_x", x_tilde),
        "fake_matched": bundle.discriminate("d_xt", x_tilde, Var(t)),
    }
    g_loss = objectives.loss_infogan(g_scores, Var(z_p), q_z, side="G",
                                     lambda_info=config.lambda_info)
    extras = {}
    if dual:
        mc, lc = bundle.components["content_encoder"](x_tilde)
        q_c = GaussianPosterior(mc, lc, kind="content")
        c_rec = reparameterize(q_c, _noise(state, (n, bundle.cfg.d_c), dt))
        code_l1 = ad.mean_abs(c_rec.values, c_t.values)
        g_loss = g_loss + code_l1
        extras["code_l1"] = float(code_l1.data)
    _check_finite({"t2i_G": g_loss})
    g_loss.backward()
    state.opt_g.step()

    out = LossBreakdown(t2i_D=float(d_loss.data), t2i_G=float(g_loss.data),
                        total_D=float(d_loss.data), total_G=float(g_loss.data))
    out.extras.update(extras)
    return out


def _avae_pass(state: TrainState, x: np.ndarray, t: np.ndarray,
               config: ExperimentConfig) -> LossBreakdown:
    bundle = state.bundle
    dt = bundle.cfg.np_dtype()
    n = x.shape[0]
    xv = Var(x)
    dual = bundle.model_kind == "D-cAVAE"

    def forward():
        q_z = bundle.infer_style(xv)
        z_hat = reparameterize(q_z, _noise(state, (n, bundle.cfg.d_z), dt))
        if dual:
            mc, lc = bundle.components["content_encoder"](xv)
            q_c = GaussianPosterior(mc, lc, kind="content")
            c = reparameterize(q_c, _noise(state, (n, bundle.cfg.d_c), dt))
        else:
            q_c = None
            c = LatentCode(bundle.encode_condition(t).mean, "content")
        x_rec = bundle.generate_image(z_hat, c)
        return q_z, z_hat, q_c, c, x_rec

    def score_pairs(z_hat, c, x_rec):
        pairs = {
            "cycle": (bundle.discriminate("d_cycle", xv, xv),
                      bundle.discriminate("d_cycle", xv, x_rec)),
            "xt": (bundle.discriminate("d_xt", xv, Var(t)),
                   bundle.discriminate("d_xt", x_rec, Var(t))),
            "xtz": (bundle.discriminate("d_xtz", xv, Var(t), z_hat.values),
                    bundle.discriminate("d_xtz", x_rec, Var(t), z_hat.values)),
        }
        if dual:
            pairs["xtc"] = (bundle.discriminate("d_xtc", xv, Var(t), c.values),
                            bundle.discriminate("d_xtc", x_rec, Var(t), c.values))
        return pairs

    _zero_all(state)
    with ad.no_grad():
        q_z, z_hat, q_c, c, x_rec = forward()
    d_loss = objectives.loss_vae_elbo(score_pairs(z_hat, c, x_rec), [], side="D")
    _check_finite({"image_cycle_D": d_loss})
    d_loss.backward()
    state.opt_d.step()

    _zero_all(state)
    q_z, z_hat, q_c, c, x_rec = forward()
    posteriors = [q_z] + ([q_c] if dual else [])
    g_loss = objectives.loss_vae_elbo(score_pairs(z_hat, c, x_rec), posteriors,
                                      side="G", lam=config.lam_kl)
    _check_finite({"image_cycle_G": g_loss})
    g_loss.backward()
    state.opt_g.step()

    out = LossBreakdown(total_D=float(d_loss.data), total_G=float(g_loss.data))
    out.extras.update({"vae_D": float(d_loss.data), "vae_G": float(g_loss.data),
                       "kl_z": float(objectives.kl_standard_normal(q_z).data)})
    if dual:
        out.extras["kl_cx"] = float(objectives.kl_standard_normal(q_c).data)
    return out


# ---------------------------------------------------------------------------
# the step and the experiment loop
# ---------------------------------------------------------------------------

def _merge_breakdowns(first: LossBreakdown, second: LossBreakdown | None) -> LossBreakdown:
    if second is None:
        return first
    merged = LossBreakdown()
    for key in (*objectives.COMPONENT_KEYS, "total_G", "total_D"):
        a, b = getattr(first, key), getattr(second, key)
        a = float(a.data) if isinstance(a, Var) else a
        b = float(b.data) if isinstance(b, Var) else b
        if a is None and b is None:
            continue
        setattr(merged, key, (a or 0.0) + (b or 0.0))
    for key in set(first.extras) | set(second.extras):
        merged.extras[key] = first.extras.get(key, 0.0) + second.extras.get(key, 0.0)
    return merged


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray],
               config: ExperimentConfig) -> LossBreakdown:
    """Run one full step (both passes) on a batch; advances the step counter.

    On a non-finite loss the state is rolled back to its pre-step snapshot and
    the error names the offending component.
    """
    images, conds = batch
    x = np.ascontiguousarray(images.transpose(0, 3, 1, 2)).astype(
        state.bundle.cfg.np_dtype())
    t = conds.astype(state.bundle.cfg.np_dtype())
    snap = state.snapshot()
    try:
        if state.bundle.model_kind in ("DRAI", "DAI"):
            flags = config.flags
            pass1 = _dual_pass(state, x, t, config,
                               dataclasses.replace(flags, selfReg=False), None)
            pass2 = None
            if config.second_pass and (config.second_pass_adversarial or flags.selfReg):
                ids = [dataio.sample_transform(state.rng) for _ in range(x.shape[0])]
                x_prime = np.stack([dataio.apply_transform(img, tid)
                                    for img, tid in zip(x.transpose(0, 2, 3, 1), ids)])
                x_prime = np.ascontiguousarray(x_prime.transpose(0, 3, 1, 2))
                if config.second_pass_adversarial:
                    pass2 = _dual_pass(state, x_prime, t, config, flags,
                                       x if flags.selfReg else None)
                else:
                    pass2 = _self_only_pass(state, x, x_prime, config)
        elif state.bundle.model_kind in ("cInfoGAN", "D-cInfoGAN"):
            pass1 = _infogan_pass(state, x, t, config)
            pass2 = None
            if config.second_pass:
                ids = [dataio.sample_transform(state.rng) for _ in range(x.shape[0])]
                x_prime = np.stack([dataio.apply_transform(img, tid)
                                    for img, tid in zip(x.transpose(0, 2, 3, 1), ids)])
                pass2 = _infogan_pass(state, np.ascontiguousarray(
                    x_prime.transpose(0, 3, 1, 2)), t, config)
        else:
            pass1 = _avae_pass(state, x, t, config)
            pass2 = None
            if config.second_pass:
                ids = [dataio.sample_transform(state.rng) for _ in range(x.shape[0])]
                x_prime = np.stack([dataio.apply_transform(img, tid)
                                    for img, tid in zip(x.transpose(0, 2, 3, 1), ids)])
                pass2 = _avae_pass(state, np.ascontiguousarray(
                    x_prime.transpose(0, 3, 1, 2)), t, config)
    except NonFiniteLossError:
        state.restore(snap)
        raise
    state.step += 1
    return _merge_breakdowns(pass1, pass2)


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoints: list[Path]
    metrics_path: Path
    samples: list[Path]
    final_state: TrainState | None = None


def _net_config_for(dataset: dataio.DatasetBundle, config: ExperimentConfig) -> NetConfig:
    return NetConfig(image_size=dataset.image_size, channels=dataset.channels,
                     t_dim=dataset.t_dim, d_z=config.d_z, d_c=config.d_c,
                     width=config.width)


def load_or_build_dataset(config: ExperimentConfig) -> dataio.DatasetBundle:
    if config.data_dir:
        return dataio.load_dataset(config.data_dir)
    if config.profile != "synthetic":
        raise ConfigurationError(f"profile {config.profile!r} needs data_dir")
    spec = dataio.SyntheticSpec(**config.synthetic)
    return dataio.make_synthetic_dataset(spec)


def run_experiment(config: ExperimentConfig,
                   dataset: dataio.DatasetBundle | None = None,
                   resume: bool = False) -> RunArtifacts:
    """Execute a full run: steps, periodic checkpoints, metrics log, samples."""
    dataset = dataset or load_or_build_dataset(config)
    if dataset.profile != config.profile:
        raise ConfigurationError(
            f"dataset profile {dataset.profile!r} != config profile {config.profile!r}")
    net_cfg = _net_config_for(dataset, config)
    run_dir = Path(config.out_dir)
    ckpt_dir = run_dir / "checkpoints"
    samples_dir = run_dir / "samples"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    samples_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    state = init_train_state(config, net_cfg)
    metrics_path = run_dir / "metrics.jsonl"
    if resume:
        existing = sorted(ckpt_dir.glob("step-*.ckpt"))
        if existing:
            state = load_checkpoint(existing[-1], expected_config=config)
            log.info("resumed from %s at step %d", existing[-1].name, state.step)
        else:
            raise CheckpointError("resume requested but no checkpoint found")
    elif metrics_path.exists():
        metrics_path.unlink()

    train = dataset.splits["train"]
    if len(train) < config.batch_size:
        raise ConfigurationError("train split smaller than one batch")

    checkpoints, samples = [], []

    def save_snapshot():
        path = ckpt_dir / f"step-{state.step:06d}.ckpt"
        save_checkpoint(state, path, config)
        checkpoints.append(path)
        grid = _sample_grid(state.bundle, dataset, state.step)
        if grid is not None:
            from .genlab import write_image_grid

            spath = samples_dir / f"step-{state.step:06d}.png"
            write_image_grid(grid, spath)
            samples.append(spath)

    if not resume:
        save_snapshot()

    with open(metrics_path, "a") as metrics_fh:
        while state.step < config.steps:
            idx = state.rng.choice(len(train), size=config.batch_size, replace=False)
            batch = (train.images[idx], train.conditions[idx])
            breakdown = train_step(state, batch, config)
            record = {"step": state.step, **breakdown.scalars()}
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if state.step % config.eval_every == 0 or state.step == config.steps:
                metrics_fh.flush()
                save_snapshot()
    if not checkpoints or checkpoints[-1].name != f"step-{state.step:06d}.ckpt":
        save_snapshot()
    return RunArtifacts(run_dir, checkpoints, metrics_path, samples, final_state=state)


# ---------------------------------------------------------------------------
# sample grids (lightweight; the full layouts live in genlab)
# ---------------------------------------------------------------------------

def _sample_grid(bundle: ComponentBundle, dataset: dataio.DatasetBundle,
                 step: int, per_cond: int = 4, conds: int = 3) -> np.ndarray | None:
    """(rows, cols, H, W, C): one row per condition, reference image first."""
    split = dataset.splits.get("test") or dataset.splits.get("train")
    if split is None or not len(split):
        return None
    _, first_idx = np.unique(split.conditions, axis=0, return_index=True)
    rows = []
    rng = np.random.default_rng([step, 17])
    dt = bundle.cfg.np_dtype()
    with ad.no_grad():
        for i in first_idx[:conds]:
            t = np.repeat(split.conditions[i][None], per_cond, axis=0).astype(dt)
            post = bundle.encode_condition(t)
            c = LatentCode(post.mean, "content")
            z = LatentCode(rng.standard_normal((per_cond, bundle.cfg.d_z)).astype(dt), "style")
            imgs = bundle.generate_image(z, c).data.transpose(0, 2, 3, 1)
            rows.append(np.concatenate([split.images[i][None], imgs], axis=0))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# checkpointing: deterministic archives
# ---------------------------------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def _write_deterministic_zip(path: Path, entries: dict[str, bytes]) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])


def save_checkpoint(state: TrainState, path, config: ExperimentConfig) -> Path:
    """Write bundle params, optimizer slots, rng state, and the mismatch
    reservoir into a schema-versioned archive; byte-identical for equal state."""
    path = Path(path)
    net = state.bundle.cfg
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "step": state.step,
        "model_kind": state.bundle.model_kind,
        "net": dataclasses.asdict(net),
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
    }
    entries = {"manifest.json": json.dumps(manifest, sort_keys=True).encode()}
    for name, arr in state.bundle.state_dict().items():
        entries[f"params/{name}.npy"] = _npy_bytes(arr)
    for group, opt in (("d", state.opt_d), ("g", state.opt_g)):
        sd = opt.state_dict()
        entries[f"opt/{group}/t.json"] = json.dumps({"t": sd["t"]}).encode()
        for i, (m, v) in enumerate(zip(sd["m"], sd["v"])):
            entries[f"opt/{group}/m_{i:04d}.npy"] = _npy_bytes(m)
            entries[f"opt/{group}/v_{i:04d}.npy"] = _npy_bytes(v)
    entries["rng.json"] = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode()
    if state.mismatch._res_images:
        entries["reservoir/images.npy"] = _npy_bytes(np.stack(state.mismatch._res_images))
        entries["reservoir/keys.npy"] = _npy_bytes(
            np.stack([np.frombuffer(k, dtype=np.uint8) for k in state.mismatch._res_keys]))
    _write_deterministic_zip(path, entries)
    return path


def load_checkpoint(path, expected_config: ExperimentConfig | None = None) -> TrainState:
    """Rebuild a TrainState bit-exactly from an archive."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise CheckpointError(
                f"schema version {manifest.get('schema_version')} != {SCHEMA_VERSION}")
        config = ExperimentConfig.from_dict(manifest["config"])
        if expected_config is not None:
            if expected_config.config_hash() != manifest["config_hash"]:
                raise CheckpointError("config hash differs from checkpoint; refusing to resume")
        net_cfg = NetConfig(**manifest["net"])
        if net_cfg.d_z != config.d_z or net_cfg.d_c != config.d_c:
            raise CheckpointError("checkpoint latent dims disagree with its config")
        state = init_train_state(config, net_cfg)
        state.step = int(manifest["step"])
        params = {}
        for name in zf.namelist():
            if name.startswith("params/") and name.endswith(".npy"):
                params[name[len("params/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
        try:
            state.bundle.load_state_dict(params)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        for group, opt in (("d", state.opt_d), ("g", state.opt_g)):
            t = json.loads(zf.read(f"opt/{group}/t.json"))["t"]
            m, v = [], []
            for i in range(len(opt.params)):
                m.append(np.load(io.BytesIO(zf.read(f"opt/{group}/m_{i:04d}.npy"))))
                v.append(np.load(io.BytesIO(zf.read(f"opt/{group}/v_{i:04d}.npy"))))
            opt.load_state_dict({"t": t, "m": m, "v": v})
        state.rng.bit_generator.state = json.loads(zf.read("rng.json"))
        names = set(zf.namelist())
        if "reservoir/images.npy" in names:
            images = np.load(io.BytesIO(zf.read("reservoir/images.npy")))
            keys = np.load(io.BytesIO(zf.read("reservoir/keys.npy")))
            state.mismatch._res_images = [img for img in images]
            state.mismatch._res_keys = [k.tobytes() for k in keys]
    return state
