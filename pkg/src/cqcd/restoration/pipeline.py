"""The circular restoration loop.

Each epoch: estimate one field per frame, warp the frames with it, fuse the
tight-frame features of the warped frames into ``I*`` with the blur remover,
invert the fields numerically and re-distort ``I*`` through the inverses.
The estimator minimizes ``L_DE = L_dist + L_rec + lam * L_bc`` and the remover
``L_BR = L_dist + L_rec``; the two are updated in alternating 50-epoch phases.
Inverse fields are constants for backpropagation and are recomputed every
epoch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields as dc_fields

import numpy as np
import torch

from ..imaging import DimensionError, DisplacementField, as_sequence
from ..quasiconformal import diagnostics, invert_field
from . import ops
from .models import BlurRemover, ConvEstimator, GridEstimator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("epoch", "l_rec", "l_dist", "l_bc", "l_de", "l_br")


class NumericalFailure(RuntimeError):
    """A loss became non-finite; ``dump`` holds the state at failure."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class RestorationConfig:
    lam: float = 0.1
    tf_level: int = 1
    use_tf: bool = True
    backend: str = "grid"
    grid_spacing: int = 8
    displacement_scale: float = 10.0
    center_fields: bool = True
    hidden: int = 256
    linear_remover: bool = False
    lr_estimator: float = 1e-2
    lr_remover: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 250
    epochs: int = 1000
    phase_epochs: int = 50
    early_stop_window: int = 100
    early_stop_tol: float = 1e-5
    inverse_tol: float = 1e-3
    inverse_max_iter: int = 50
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 1 <= self.tf_level <= 3:
            raise ValueError("tf_level must be in 1..3")
        if self.backend not in ("grid", "conv"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.grid_spacing < 1 or self.displacement_scale <= 0:
            raise ValueError("grid_spacing and displacement_scale must be positive")
        if self.epochs < 0 or self.phase_epochs < 1:
            raise ValueError("epochs must be >= 0 and phase_epochs >= 1")
        if self.lr_estimator <= 0 or self.lr_remover <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RestorationConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown restoration config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLosses:
    epoch: int
    l_rec: float
    l_dist: float
    l_bc: float
    l_de: float
    l_br: float

    def row(self):
        return [self.epoch, self.l_rec, self.l_dist, self.l_bc, self.l_de, self.l_br]


@dataclass
class Forward:
    dx: torch.Tensor
    dy: torch.Tensor
    inv_dx: torch.Tensor
    inv_dy: torch.Tensor
    warped: torch.Tensor
    restored: torch.Tensor      # (1, C, H, W)
    redistorted: torch.Tensor
    rec: torch.Tensor
    dist: torch.Tensor
    bc: torch.Tensor
    inversion_ok: list


def to_tensor(frames) -> torch.Tensor:
    seq = as_sequence(frames)
    return torch.from_numpy(np.ascontiguousarray(seq.transpose(0, 3, 1, 2))).to(torch.float64)


def to_fields(dx: torch.Tensor, dy: torch.Tensor) -> list:
    dx = dx.detach().numpy()
    dy = dy.detach().numpy()
    return [DisplacementField(a, b) for a, b in zip(dx, dy)]


class RestorationState:
    """Everything the optimizer owns: models, optimizers, history and the latest outputs."""

    def __init__(self, config: RestorationConfig, frames):
        config.validate()
        self.config = config
        self.frames = to_tensor(frames)
        t, c, h, w = self.frames.shape
        if t < 1:
            raise DimensionError("need at least one frame")
        self.generator = torch.Generator().manual_seed(config.seed)
        self.tf = ops.TightFrame(config.tf_level)
        planes = self.tf.planes_per_channel() * c if config.use_tf else c
        if config.backend == "grid":
            self.estimator = GridEstimator(t, h, w, config.grid_spacing, config.displacement_scale,
                                           config.center_fields)
            self.estimator_features = None
        else:
            self.estimator = ConvEstimator(self.tf.planes_per_channel() * c,
                                           displacement_scale=config.displacement_scale,
                                           center=config.center_fields, generator=self.generator)
            self.estimator_features = self.tf(self.frames)
        self.remover = BlurRemover(t * planes, c, config.hidden, config.linear_remover, self.generator)
        self.opt_estimator = torch.optim.RMSprop(self.estimator.parameters(), lr=config.lr_estimator)
        self.opt_remover = torch.optim.Adam(self.remover.parameters(), lr=config.lr_remover)
        self.history: list[EpochLosses] = []
        self.epoch = 0
        self.warnings: list[str] = []
        self.last: Forward | None = None

    @property
    def shape(self):
        return tuple(self.frames.shape)

    # -- forward pass ------------------------------------------------------

    def estimate(self):
        return self.estimator(self.estimator_features)

    def invert(self, dx: torch.Tensor, dy: torch.Tensor):
        inv_x, inv_y, ok = [], [], []
        for fld in to_fields(dx, dy):
            res = invert_field(fld, self.config.inverse_tol, self.config.inverse_max_iter)
            inv_x.append(res.field.dx)
            inv_y.append(res.field.dy)
            ok.append(res.converged)
        return torch.tensor(np.array(inv_x)), torch.tensor(np.array(inv_y)), ok

    def remover_input(self, warped: torch.Tensor) -> torch.Tensor:
        t, c, h, w = warped.shape
        feats = self.tf(warped) if self.config.use_tf else warped
        return feats.reshape(1, -1, h, w)

    def forward(self, inverses=None, field_grad: bool = True) -> Forward:
        with torch.set_grad_enabled(field_grad and torch.is_grad_enabled()):
            dx, dy = self.estimate()
        if inverses is None:
            inv_dx, inv_dy, ok = self.invert(dx, dy)
        else:
            inv_dx, inv_dy = inverses
            ok = [True] * len(inv_dx)
        t = self.frames.shape[0]
        warped = ops.warp(self.frames, dx, dy)
        restored = self.remover(self.remover_input(warped))
        redistorted = ops.warp(restored.expand(t, -1, -1, -1), inv_dx, inv_dy)
        rec = (restored - warped).abs().mean()
        dist = (self.frames - redistorted).abs().mean()
        bc = (ops.mu_squared(dx, dy).mean() + ops.mu_squared(inv_dx, inv_dy).mean()) / 4
        return Forward(dx, dy, inv_dx, inv_dy, warped, restored, redistorted, rec, dist, bc, ok)

    def objectives(self, fw: Forward):
        br = fw.dist + fw.rec
        return br + self.config.lam * fw.bc, br

    # -- training ----------------------------------------------------------

    def phase(self, epoch: int) -> str:
        """Remover first so the estimator never chases an untrained ``I*``."""
        return "remover" if (epoch // self.config.phase_epochs) % 2 == 0 else "estimator"

    def _set_lr(self, epoch: int):
        factor = self.config.lr_decay ** (epoch // self.config.lr_decay_every)
        for g in self.opt_estimator.param_groups:
            g["lr"] = self.config.lr_estimator * factor
        for g in self.opt_remover.param_groups:
            g["lr"] = self.config.lr_remover * factor

    def step(self) -> EpochLosses:
        epoch = self.epoch
        self._set_lr(epoch)
        phase = self.phase(epoch)
        if phase == "remover":
            self.remover.train()
            fw = self.forward(field_grad=False)
        else:
            self.remover.eval()
            fw = self.forward()
        l_de, l_br = self.objectives(fw)
        rec = EpochLosses(epoch, fw.rec.item(), fw.dist.item(), fw.bc.item(), l_de.item(), l_br.item())
        if not all(math.isfinite(v) for v in rec.row()[1:]):
            raise NumericalFailure(f"non-finite loss at epoch {epoch}", self.dump(rec))
        if not all(fw.inversion_ok):
            bad = [i for i, ok in enumerate(fw.inversion_ok) if not ok]
            self.warnings.append(f"epoch {epoch}: inversion did not converge for frames {bad}")
        self.opt_estimator.zero_grad(set_to_none=True)
        self.opt_remover.zero_grad(set_to_none=True)
        if phase == "remover":
            l_br.backward()
            self.opt_remover.step()
        else:
            l_de.backward()
            self.opt_estimator.step()
        self.history.append(rec)
        self.epoch += 1
        if phase == "remover" and self.phase(self.epoch) != "remover":
            self.freeze_statistics()
        return rec

    def freeze_statistics(self):
        """Set the normalization statistics to those of the current remover input."""
        if self.config.linear_remover:
            return
        self.remover.train()
        saved = [m.momentum for m in self.remover.norms]
        for m in self.remover.norms:
            m.reset_running_stats()
            m.momentum = None  # cumulative average: one pass stores the exact batch statistics
        with torch.no_grad():
            self.forward(field_grad=False)
        for m, mom in zip(self.remover.norms, saved):
            m.momentum = mom
        self.remover.eval()

    def should_stop(self) -> bool:
        """No relative improvement of the best ``L_DE`` over the last window.

        Best-so-far rather than endpoint values: the L1 objectives jitter from
        epoch to epoch and a single noisy sample must not end the run.
        """
        w = self.config.early_stop_window
        if len(self.history) <= w:
            return False
        old = min(r.l_de for r in self.history[:-w])
        new = min(r.l_de for r in self.history[-w:])
        return (old - new) / max(abs(old), 1e-300) < self.config.early_stop_tol

    def finalize(self) -> Forward:
        self.remover.eval()
        with torch.no_grad():
            self.last = self.forward()
        return self.last

    # -- outputs -----------------------------------------------------------

    def restored_image(self) -> np.ndarray:
        fw = self.last or self.finalize()
        return fw.restored[0].detach().numpy().transpose(1, 2, 0).copy()

    def fields(self) -> list:
        fw = self.last or self.finalize()
        return to_fields(fw.dx, fw.dy)

    def inverse_fields(self) -> list:
        fw = self.last or self.finalize()
        return to_fields(fw.inv_dx, fw.inv_dy)

    def field_diagnostics(self) -> dict:
        return {
            "forward": [diagnostics(f) for f in self.fields()],
            "inverse": [diagnostics(f) for f in self.inverse_fields()],
        }

    def dump(self, rec: EpochLosses | None = None) -> dict:
        return {
            "epoch": self.epoch,
            "losses": asdict(rec) if rec else None,
            "config": self.config.to_dict(),
            "estimator_finite": all(bool(torch.isfinite(p).all()) for p in self.estimator.parameters()),
            "remover_finite": all(bool(torch.isfinite(p).all()) for p in self.remover.parameters()),
        }

    def write_losses_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(LOSS_COLUMNS)
            for r in self.history:
                wr.writerow([r.epoch] + [repr(v) for v in r.row()[1:]])

    def save(self, path) -> None:
        """Versioned checkpoint: config echo, epoch, parameters, optimizer state, history."""
        torch.save({
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "epoch": self.epoch,
            "estimator": self.estimator.state_dict(),
            "remover": self.remover.state_dict(),
            "opt_estimator": self.opt_estimator.state_dict(),
            "opt_remover": self.opt_remover.state_dict(),
            "history": [asdict(r) for r in self.history],
            "warnings": list(self.warnings),
        }, path)

    @classmethod
    def load(cls, path, frames) -> "RestorationState":
        blob = torch.load(path, weights_only=False)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
        state = cls(RestorationConfig.from_dict(blob["config"]), frames)
        state.estimator.load_state_dict(blob["estimator"])
        state.remover.load_state_dict(blob["remover"])
        state.opt_estimator.load_state_dict(blob["opt_estimator"])
        state.opt_remover.load_state_dict(blob["opt_remover"])
        state.history = [EpochLosses(**r) for r in blob["history"]]
        state.epoch = blob["epoch"]
        state.warnings = list(blob["warnings"])
        return state


def optimize(config: RestorationConfig, frames, state: RestorationState | None = None):
    """Run the alternating optimization; returns ``(I*, fields, state)``.

    Pass ``state`` to resume a previous run on the same frames.
    """
    seq = as_sequence(frames, check_size=True)
    if seq.shape[0] < 2 and state is None:
        raise DimensionError("restoration needs at least two frames")
    state = state or RestorationState(config, seq)
    while state.epoch < state.config.epochs:
        rec = state.step()
        if rec.epoch % state.config.phase_epochs == state.config.phase_epochs - 1:
            log.info("epoch %d (%s phase): l_rec=%.5f l_dist=%.5f l_bc=%.5f",
                     rec.epoch, state.phase(rec.epoch), rec.l_rec, rec.l_dist, rec.l_bc)
        if state.should_stop():
            log.info("early stop at epoch %d", rec.epoch)
            break
    state.finalize()
    return state.restored_image(), state.fields(), state


@dataclass
class GradientSample:
    route: str          # "de" or "br"
    analytic: float
    numeric: float
    loss: float         # loss value at the unperturbed point

    def relative_error(self, floor: float = 1e-6) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), floor)


def gradient_samples(state: RestorationState, n_params: int = 64, step: float = 1e-5, seed: int = 0,
                     groups=("estimator", "remover")) -> list:
    """Autograd and central-difference derivatives for sampled parameter entries.

    ``L_DE`` is checked with the remover in inference mode and ``L_BR`` in
    training mode, as during optimization. The inverse fields are frozen for
    both routes. The sampled parameters are split evenly over ``groups``.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        dx, dy = state.estimate()
        inverses = state.invert(dx, dy)[:2]
    est_params = list(state.estimator.parameters())
    rem_params = list(state.remover.parameters())
    pools = [{"estimator": est_params, "remover": rem_params}[g] for g in groups]
    out = []
    for which, train in (("de", False), ("br", True)):
        state.remover.train(train)
        # running statistics must not drift between the finite-difference evaluations
        momenta = [m.momentum for m in state.remover.norms]
        for m in state.remover.norms:
            m.momentum = 0.0

        def loss():
            fw = state.forward(inverses=inverses)
            de, br = state.objectives(fw)
            return de if which == "de" else br

        for p in est_params + rem_params:
            p.grad = None
        base = loss()
        base.backward()
        picks = []
        for k, pool in enumerate(pools):
            share = n_params // len(pools) + (k < n_params % len(pools))
            picks += _sample_entries(rng, pool, share)
        with torch.no_grad():
            for p, idx in picks:
                orig = p[idx].item()
                p[idx] = orig + step
                up = loss().item()
                p[idx] = orig - step
                down = loss().item()
                p[idx] = orig
                out.append(GradientSample(which, p.grad[idx].item(), (up - down) / (2 * step), base.item()))
        for m, mom in zip(state.remover.norms, momenta):
            m.momentum = mom
    for p in est_params + rem_params:
        p.grad = None
    state.remover.eval()
    return out


def gradient_check(state: RestorationState, n_params: int = 64, step: float = 1e-5, seed: int = 0,
                   floor: float = 1e-6, groups=("estimator", "remover")) -> float:
    """Max relative error between autograd and central differences.

    The error is ``|a - n| / max(|a|, |n|, floor)``: central differences of a
    float64 loss carry ~1e-11 of round-off, so gradients below ``floor`` are
    effectively compared on an absolute scale.
    """
    samples = gradient_samples(state, n_params, step, seed, groups)
    return max(s.relative_error(floor) for s in samples)


def _sample_entries(rng, params, n):
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(int(sizes.sum()), size=min(n, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for k in np.sort(flat):
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        out.append((params[i], np.unravel_index(int(k - offsets[i]), tuple(params[i].shape))))
    return out
