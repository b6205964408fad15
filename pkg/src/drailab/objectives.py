"""Loss terms: least-squares adversarial objectives plus the disentanglement
constraints and the KL regularizers.

All adversarial terms use least-squares targets (fake 0, real 1, generator
target 1) on raw discriminator scores.  The l1-style norms here are per-entry
mean absolute differences so magnitudes stay comparable when the style and
content dimensions differ.  These are pure functions of graph nodes; calling
``backward`` on a returned scalar drives the actual updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, mean_abs, mse_to
from .errors import ConfigurationError
from .netcore import GaussianPosterior

COMPONENT_KEYS = ("t2i_D", "t2i_G", "dali_D", "dali_G", "image_cycle_D", "image_cycle_G",
                  "code_cycle", "grl", "self_reg", "kl_z", "kl_cx", "kl_ct")


@dataclass
class AblationFlags:
    """Which of the three added constraints are active; all-false is the base model."""

    selfReg: bool = True
    MIReg: bool = True
    featureCycle: bool = True

    @classmethod
    def for_model_kind(cls, kind: str) -> "AblationFlags":
        if kind == "DRAI":
            return cls(True, True, True)
        if kind == "DAI":
            return cls(False, False, False)
        return cls(False, False, False)

    def as_dict(self) -> dict:
        return {"selfReg": self.selfReg, "MIReg": self.MIReg, "featureCycle": self.featureCycle}


@dataclass
class LossBreakdown:
    """Named scalar map for one step; disabled terms stay None, not zero."""

    t2i_D: object = None
    t2i_G: object = None
    dali_D: object = None
    dali_G: object = None
    image_cycle_D: object = None
    image_cycle_G: object = None
    code_cycle: object = None
    grl: object = None
    self_reg: object = None
    kl_z: object = None
    kl_cx: object = None
    kl_ct: object = None
    total_G: object = None
    total_D: object = None
    extras: dict = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        out = {}
        for key in (*COMPONENT_KEYS, "total_G", "total_D"):
            value = getattr(self, key)
            if value is not None:
                out[key] = float(value.data) if isinstance(value, Var) else float(value)
        for key, value in self.extras.items():
            out[key] = float(value.data) if isinstance(value, Var) else float(value)
        return out


def _check_same_length(*scores) -> None:
    lengths = {np.asarray(ad.as_var(s).data).shape[0] for s in scores if s is not None}
    if len(lengths) > 1:
        raise ConfigurationError(f"score batches have mismatched lengths {sorted(lengths)}")


def loss_t2i(scores_real, scores_fake, scores_matched, scores_mismatched,
             scores_fake_matched, side: str):
    """Conditional-generation objective with the matching-aware discriminator.

    The two negative groups of the pair discriminator (mismatched-real and
    matched-fake) are each weighted one half.  ``scores_mismatched`` may be
    None when a degenerate batch produced no usable mismatched pairs.
    """
    if side == "D":
        _check_same_length(scores_real, scores_fake, scores_matched, scores_fake_matched)
        loss = (mse_to(scores_real, 1.0) + mse_to(scores_fake, 0.0)
                + mse_to(scores_matched, 1.0) + 0.5 * mse_to(scores_fake_matched, 0.0))
        if scores_mismatched is not None:
            loss = loss + 0.5 * mse_to(scores_mismatched, 0.0)
        return loss
    if side == "G":
        _check_same_length(scores_fake, scores_fake_matched)
        return mse_to(scores_fake, 1.0) + mse_to(scores_fake_matched, 1.0)
    raise ConfigurationError(f"side must be 'D' or 'G', got {side!r}")


def loss_dali(scores: dict, side: str):
    """Dual adversarial inference: encoder joints vs decoder joints, both latents.

    ``scores`` needs keys enc_z = D(x, inferred z), dec_z = D(generated x, z),
    enc_c, dec_c.  The generator side flips every target so both the image
    generator and the feature encoders move the joints toward each other.
    """
    for key in ("enc_z", "dec_z", "enc_c", "dec_c"):
        if key not in scores:
            raise ConfigurationError(f"loss_dali missing score group {key!r}")
    _check_same_length(*scores.values())
    if side == "D":
        return (mse_to(scores["enc_z"], 1.0) + mse_to(scores["dec_z"], 0.0)
                + mse_to(scores["enc_c"], 1.0) + mse_to(scores["dec_c"], 0.0))
    if side == "G":
        return (mse_to(scores["dec_z"], 1.0) + mse_to(scores["enc_z"], 0.0)
                + mse_to(scores["dec_c"], 1.0) + mse_to(scores["enc_c"], 0.0))
    raise ConfigurationError(f"side must be 'D' or 'G', got {side!r}")


def loss_image_cycle(scores_xx, scores_xrec, side: str):
    """Adversarial reconstruction: (x, x) against (x, reconstruction)."""
    if side == "D":
        _check_same_length(scores_xx, scores_xrec)
        return mse_to(scores_xx, 1.0) + mse_to(scores_xrec, 0.0)
    if side == "G":
        return mse_to(scores_xrec, 1.0)
    raise ConfigurationError(f"side must be 'D' or 'G', got {side!r}")


def loss_code_cycle(z, c, z_prime, c_prime):
    """Recover the input codes from the generated image (per-entry l1)."""
    z, c, z_prime, c_prime = map(ad.as_var, (z, c, z_prime, c_prime))
    if z.data.shape != z_prime.data.shape or c.data.shape != c_prime.data.shape:
        raise ConfigurationError("code-cycle dimensions do not match")
    return mean_abs(z_prime, z) + mean_abs(c_prime, c)


def loss_grl(z_hat, c_hat, f_z, f_c):
    """Cross-prediction loss with gradient reversal toward the encoders.

    ``f_z`` and ``f_c`` are the raw predictor callables (content -> style and
    style -> content); the reversal is applied here, on both the predictor
    input path and the target path, so predictor parameters receive the plain
    minimizing gradient while every gradient reaching the encoders is negated
    and the encoders maximize the prediction error.
    """
    z_hat, c_hat = ad.as_var(z_hat), ad.as_var(c_hat)
    zr, cr = ad.grl(z_hat), ad.grl(c_hat)
    return mean_abs(zr, f_z(cr)) + mean_abs(cr, f_c(zr))


def loss_self(c_hat, c_hat_prime, z_hat, z_hat_prime, margin: float = 1.0):
    """Attract content codes across a content-preserving transform, repel style.

    The repel term is hinged at ``margin`` so the objective is bounded below.
    """
    c_hat, c_hat_prime = ad.as_var(c_hat), ad.as_var(c_hat_prime)
    z_hat, z_hat_prime = ad.as_var(z_hat), ad.as_var(z_hat_prime)
    if c_hat.data.shape != c_hat_prime.data.shape or z_hat.data.shape != z_hat_prime.data.shape:
        raise ConfigurationError("self-regularization code shapes do not match")
    attract = mean_abs(c_hat, c_hat_prime)
    repel = mean_abs(z_hat, z_hat_prime)
    return attract + ad.relu(float(margin) - repel)


def kl_standard_normal(p: GaussianPosterior):
    """Closed-form KL(q || N(0, I)) for a diagonal Gaussian, batch-meaned."""
    mean, logvar = p.mean, p.log_variance
    if not (np.isfinite(mean.data).all() and np.isfinite(logvar.data).all()):
        raise ConfigurationError("posterior fields must be finite")
    per_entry = ad.square(mean) + ad.exp(logvar) - logvar - 1.0
    batch = mean.data.shape[0] if mean.data.ndim > 1 else 1
    return 0.5 * (1.0 / batch) * ad.vsum(per_entry)


def gaussian_nll(code, q: GaussianPosterior):
    """Mean per-entry negative log-likelihood of a code under a diagonal Gaussian."""
    code = ad.as_var(code)
    if code.data.shape != q.mean.data.shape:
        raise ConfigurationError("code/posterior shapes do not match")
    resid = ad.square(code - q.mean) * ad.exp(-1.0 * q.log_variance)
    return 0.5 * ad.mean(resid + q.log_variance + float(np.log(2.0 * np.pi)))


def loss_infogan(gan_scores: dict, c_true, c_predicted: GaussianPosterior | None,
                 side: str, lambda_info: float = 1.0):
    """Adversarial loss plus the mutual-information surrogate on the input code.

    The surrogate is the Gaussian NLL of the input code under the Q head's
    posterior (the entropy of the fixed prior is a dropped constant); it is
    attached to the generator side, where both the generator and Q minimize it.
    """
    if side == "D":
        for key in ("real", "fake", "matched", "fake_matched"):
            if key not in gan_scores:
                raise ConfigurationError(f"loss_infogan missing score group {key!r}")
        return (mse_to(gan_scores["real"], 1.0) + mse_to(gan_scores["fake"], 0.0)
                + mse_to(gan_scores["matched"], 1.0) + mse_to(gan_scores["fake_matched"], 0.0))
    if side == "G":
        loss = mse_to(gan_scores["fake"], 1.0) + mse_to(gan_scores["fake_matched"], 1.0)
        if lambda_info:
            if c_predicted is None:
                raise ConfigurationError("loss_infogan needs the Q posterior on the G side")
            loss = loss + lambda_info * gaussian_nll(c_true, c_predicted)
        return loss
    raise ConfigurationError(f"side must be 'D' or 'G', got {side!r}")


def loss_vae_elbo(scores: dict, posteriors, side: str, lam: float = 1.0):
    """Adversarial reconstruction terms plus the KL regularizers.

    ``scores`` maps discriminator name -> (positive pair score, negative pair
    score); the cycle and conditional pairs are required, the latent-augmented
    ones optional.  KL terms attach to the generator side.
    """
    for key in ("cycle", "xt"):
        if key not in scores:
            raise ConfigurationError(f"loss_vae_elbo missing discriminator group {key!r}")
    if side == "D":
        total = None
        for pos, neg in scores.values():
            term = mse_to(pos, 1.0) + mse_to(neg, 0.0)
            total = term if total is None else total + term
        return total
    if side == "G":
        total = None
        for _, neg in scores.values():
            term = mse_to(neg, 1.0)
            total = term if total is None else total + term
        for p in posteriors:
            total = total + lam * kl_standard_normal(p)
        return total
    raise ConfigurationError(f"side must be 'D' or 'G', got {side!r}")


def full_objective(components: dict, flags: AblationFlags, lam: float = 1.0) -> LossBreakdown:
    """Assemble the complete objective from computed components.

    Base terms (conditional, dual-inference, image-cycle adversarial pairs and
    the three KLs) are always required; each flag admits exactly one extra
    term.  Supplying a term whose flag is off is treated as a wiring error.
    All non-KL weights are fixed at 1; ``lam`` scales the KL terms.
    """
    required = ["t2i_D", "t2i_G", "dali_D", "dali_G", "image_cycle_D", "image_cycle_G",
                "kl_z", "kl_cx", "kl_ct"]
    gated = {"code_cycle": flags.featureCycle, "grl": flags.MIReg, "self_reg": flags.selfReg}
    for key in required:
        if key not in components:
            raise ConfigurationError(f"full objective missing component {key!r}")
    for key, enabled in gated.items():
        if enabled and key not in components:
            raise ConfigurationError(f"flag for {key!r} is enabled but the component is missing")
        if not enabled and key in components:
            raise ConfigurationError(f"component {key!r} supplied but its flag is disabled")

    out = LossBreakdown(**{k: components[k] for k in (*required, *[k for k, e in gated.items() if e])})
    out.total_D = out.t2i_D + out.dali_D + out.image_cycle_D
    total_g = (out.t2i_G + out.dali_G + out.image_cycle_G
               + lam * (out.kl_z + out.kl_cx + out.kl_ct))
    for key, enabled in gated.items():
        if enabled:
            total_g = total_g + getattr(out, key)
    out.total_G = total_g
    return out
