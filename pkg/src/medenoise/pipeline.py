"""The full denoising loop: dictionary residue, network residue, fusion,
dictionary feedback, optimal residue and reassembly."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import dictionary as dl
from . import resnet
from .core import DenoiseConfig, DenoiseError, ImageVolume, split_rng, validate_config
from .noise import rician_unbias
from .patching import PatchSet, assemble_array, decompose, make_grid

logger = logging.getLogger(__name__)

RESIDUE_KINDS = ("R1", "R2", "Ravg", "Ropt")


class StageError(DenoiseError):
    """Failure inside one pipeline stage."""

    def __init__(self, stage, cause, patch_index=None):
        self.stage = stage
        self.cause = cause
        self.patch_index = patch_index
        where = f" (patch {patch_index})" if patch_index is not None else ""
        super().__init__(f"stage {stage}{where}: {type(cause).__name__}: {cause}")


class StackError(DenoiseError):
    def __init__(self, failures, results):
        self.failures = failures
        self.results = results
        super().__init__("; ".join(f"item {i}: {e}" for i, e in failures))


@dataclass(frozen=True, eq=False)
class ResidueMap:
    """Per-patch residues, ``values[j]`` belongs to patch ``j``.

    ``signed`` residues are ``P_j - estimate``; magnitude residues are their
    absolute values.
    """

    kind: str
    values: np.ndarray
    signed: bool = True

    def __post_init__(self):
        if self.kind not in RESIDUE_KINDS:
            raise ValueError(f"unknown residue kind {self.kind!r}")
        vals = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{self.kind} contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def sq_distance(self, other: "ResidueMap") -> float:
        """``sum_j ||self_j - other_j||_F^2``."""
        d = self.values - other.values
        return float(np.sum(d * d))


@dataclass
class PipelineReport:
    config: Dict[str, object] = field(default_factory=dict)
    setup: Dict[str, object] = field(default_factory=dict)
    iterations: List[Dict[str, object]] = field(default_factory=list)
    final: Dict[str, object] = field(default_factory=dict)
    # learned state, kept for export but not part of the text form
    dictionary: Optional[dl.Dictionary] = field(default=None, repr=False)
    net: Optional[resnet.NetParams] = field(default=None, repr=False)

    @property
    def couplings(self) -> List[float]:
        return [it["coupling"] for it in self.iterations]

    @property
    def coupling_monotone(self) -> bool:
        c = self.couplings
        return all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(c, c[1:]))

    def to_text(self) -> str:
        lines = [_kv_line("config", self.config), _kv_line("setup", self.setup)]
        lines += [_kv_line("iter", it) for it in self.iterations]
        lines.append(_kv_line("final", self.final))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v) if v else "none"
    if v is None:
        return "none"
    return str(v)


def _kv_line(kind: str, items: Dict[str, object]) -> str:
    return " ".join([f"kind={kind}"] + [f"{k}={_fmt(v)}" for k, v in items.items()])


def parse_report(text: str) -> List[Dict[str, str]]:
    """Split a report back into one ``{key: raw value}`` dict per line."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            out.append(dict(tok.split("=", 1) for tok in line.split()))
    return out


# --- stages --------------------------------------------------------------------------------

def estimate_noise_sigma(vol: ImageVolume) -> float:
    """Robust noise scale from finest-scale diagonal differences.

    Uses ``median(|d|) / 0.6745`` over the 2x2 in-plane diagonal details,
    skipping exactly flat blocks (noise-free background or saturation).
    """
    d, _ = _detail_blocks(vol.data)
    if d.size == 0:
        return 0.0
    return float(np.median(np.abs(d)) / 0.6745)


def estimate_rician_sigma(vol: ImageVolume, snr: float = 3.0) -> float:
    """Noise scale of magnitude data, measured where the signal is well above it.

    Near zero the magnitude noise is Rayleigh-like and much narrower than
    ``sigma``, so blocks whose mean is below ``snr`` times a first estimate are
    dropped before taking the robust scale.
    """
    d, mean = _detail_blocks(vol.data)
    if d.size == 0:
        return 0.0
    s0 = float(np.median(np.abs(d)) / 0.6745)
    keep = mean > snr * s0
    if keep.sum() < 16:
        return s0
    return float(np.median(np.abs(d[keep])) / 0.6745)


def _detail_blocks(x: np.ndarray):
    """Diagonal details and means of the non-flat 2x2 in-plane blocks of every slice."""
    nx, ny = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:nx, :ny]
    a, b, c, e = x[0::2, 0::2], x[1::2, 0::2], x[0::2, 1::2], x[1::2, 1::2]
    d = (a - b - c + e) / 2.0
    mean = (a + b + c + e) / 4.0
    keep = ~((a == b) & (a == c) & (a == e))
    return d[keep], mean[keep]


def fit_noise_model(vol: ImageVolume, bins: int = 16):
    """Fit ``var(noise) = a + b * intensity`` to the data; returns ``(a, b)``, both >= 0.

    Diagonal details are grouped into intensity quantile bins, each bin gets a
    robust variance ``(median|d| / 0.6745)^2``, and the line is fitted by
    non-negative least squares weighted by bin size. Additive noise gives
    ``b ~ 0``; photon-counting noise gives ``a ~ 0``.
    """
    from scipy.optimize import nnls

    d, mean = _detail_blocks(vol.data)
    if d.size < 2 * bins:
        s = estimate_noise_sigma(vol)
        return s * s, 0.0
    order = np.argsort(mean, kind="stable")
    rows, rhs = [], []
    for part in np.array_split(order, bins):
        w = math.sqrt(part.size)
        var = (np.median(np.abs(d[part])) / 0.6745) ** 2
        rows.append([w, w * float(np.mean(mean[part]))])
        rhs.append(w * var)
    (a, b), _ = nnls(np.array(rows), np.array(rhs))
    return float(a), float(b)


def synthetic_training_set(clean_patches: np.ndarray, noise_model, intensity_max: float, rng):
    """Noisy inputs and their injected noise, drawn from ``var = a + b * clean``."""
    a, b = noise_model
    base = np.clip(clean_patches, 0.0, intensity_max)
    noise = np.sqrt(a + b * base) * rng.standard_normal(base.shape)
    return base + noise, noise


def omp_tolerance(mu: float, sigma: float, m: int, lam: Optional[float] = None) -> float:
    """Residual stop ``mu * sigma * sqrt(m)``, divided by ``sqrt(lam)`` when given."""
    eps = mu * sigma * math.sqrt(m)
    return eps / math.sqrt(lam) if lam is not None else eps


def dl_residue(D, ps: PatchSet, codes, signed: bool = True) -> ResidueMap:
    recon = dl.reconstruct_all(D, codes).T.reshape(ps.patches.shape)
    diff = ps.patches - recon
    return ResidueMap("R1", diff if signed else np.abs(diff), signed)


def rl_residue(net: resnet.NetParams, ps: PatchSet, scale: float = 1.0, batch: int = 64) -> ResidueMap:
    """Network residue; patches are divided by ``scale`` going in and the output multiplied back."""
    if tuple(ps.patches.shape[1:]) != tuple(ps.grid.patch_shape):
        raise resnet.ShapeMismatch("patch set does not match its grid")
    return ResidueMap("R2", resnet.predict(net, ps.patches / scale, batch) * scale)


def fuse(r1: ResidueMap, r2: ResidueMap) -> ResidueMap:
    """Pixel-wise mean of the two residues.

    For magnitude residues the network residue is clipped at zero first.
    """
    if r1.values.shape != r2.values.shape:
        raise ValueError("residue maps are on different grids")
    if r1.signed:
        return ResidueMap("Ravg", (r1.values + r2.values) / 2.0, True)
    return ResidueMap("Ravg", (r1.values + np.maximum(r2.values, 0.0)) / 2.0, False)


def optimal_residue(D, ps: PatchSet, s: int, eps: float, signed: bool = True, workers: int = 1):
    """Re-code the original patches against ``D``; returns ``(ResidueMap, codes)``."""
    codes = dl.batch_encode(D, ps, s, eps, workers)
    r = dl_residue(D, ps, codes, signed)
    return ResidueMap("Ropt", r.values, signed), codes


def denoise_patch(p, r_opt, intensity_max: float = math.inf):
    """``|P - R_opt|`` clamped to ``[0, intensity_max]``."""
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r_opt, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"patch {p.shape} and residue {r.shape} differ")
    return np.clip(np.abs(p - r), 0.0, intensity_max)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except dl.EncodeError as exc:
        raise StageError(name, exc.cause, exc.patch_index) from exc
    except DenoiseError as exc:
        raise StageError(name, exc) from exc


def _config_echo(cfg: DenoiseConfig) -> Dict[str, object]:
    out = {}
    for k, v in asdict(cfg).items():
        out["lambda" if k == "lam" else k] = v
    return out


def denoise_volume(vol: ImageVolume, cfg: Optional[DenoiseConfig] = None):
    """Denoise one image or block; returns ``(ImageVolume, PipelineReport)``."""
    cfg = cfg or DenoiseConfig()
    validate_config(cfg, vol)
    rc = cfg.resolved(vol.shape)
    signed = rc.residue_mode == "signed"
    L = vol.intensity_max
    report = PipelineReport(config=_config_echo(rc))

    grid = _stage("decompose", make_grid, vol.shape, rc.patch_shape, rc.stride)
    ps = decompose(vol, grid)
    m = grid.patch_size
    rician = rc.bias_correction == "rician"
    if rc.noise_sigma is not None:
        sigma = rc.noise_sigma
    else:
        sigma = estimate_rician_sigma(vol) if rician else estimate_noise_sigma(vol)
    eps = omp_tolerance(rc.mu, sigma, m)
    eps_refit = omp_tolerance(rc.mu, sigma, m, rc.lam)
    noise_model = fit_noise_model(vol) if rc.rl_target == "synthetic" else (sigma * sigma, 0.0)
    report.setup.update(patches=grid.n_patches, patch_size=m, sigma=sigma, eps=eps, eps_refit=eps_refit,
                        noise_var_a=noise_model[0], noise_var_b=noise_model[1])

    D = _stage("dct_init", dl.dct_init, rc.patch_shape, rc.dict_atoms)
    fixed = (0,)  # DC atom
    codes = _stage("batch_encode", dl.batch_encode, D, ps, rc.sparsity, eps, rc.workers)
    D, codes, hist = _stage("ksvd_update", dl.ksvd_update, D, ps, codes, rc.ksvd_sweeps,
                            rc.sparsity, eps, rc.workers, fixed=fixed)
    report.setup.update(ksvd_error=dl.representation_error(D, ps, codes))

    spec = resnet.NetSpec(rc.net_depth, rc.net_filters, rc.net_kernel)
    net = resnet.net_init(spec, rc.rng_seed)
    state = resnet.TrainState(lr=rc.net_lr, batch_size=rc.net_batch)
    prev_avg = prev_r2 = None
    for it in range(rc.outer_iters):
        r1 = dl_residue(D, ps, codes, signed)
        dl_error = dl.representation_error(D, ps, codes)
        n_train = min(rc.train_patches, grid.n_patches)
        pick = np.sort(split_rng(rc.rng_seed, 1000 + it).choice(grid.n_patches, n_train, replace=False))
        if rc.rl_target == "synthetic":
            recon = dl.reconstruct_all(D, [codes[j] for j in pick]).T.reshape(ps.patches[pick].shape)
        losses = []
        before = net.copy()
        for epoch in range(rc.net_epochs):
            if rc.rl_target == "synthetic":
                # fresh noise draw every epoch
                x_train, y_train = synthetic_training_set(recon, noise_model, L,
                                                          split_rng(rc.rng_seed, 2000 + 1000 * it + epoch))
            else:
                x_train, y_train = ps.patches[pick], r1.values[pick]
            state.lr = rc.net_lr * rc.net_lr_decay ** epoch
            _, _, loss = _stage("train_net", resnet.train_epoch, net, state, x_train / L, y_train / L,
                                rc.rng_seed)
            losses.append(loss)
        r2 = _stage("rl_residue", rl_residue, net, ps, L)
        net_kept = True
        if prev_r2 is not None and fuse(r1, r2).sq_distance(r1) > fuse(r1, prev_r2).sq_distance(r1):
            # the update moved the network away from the current dictionary residue
            net, r2, net_kept = before, prev_r2, False
        ravg = fuse(r1, r2)
        coupling = ravg.sq_distance(r1)
        change = math.nan if prev_avg is None else (
            float(np.linalg.norm(ravg.values - prev_avg.values)) / max(float(np.linalg.norm(ravg.values)), 1e-300))
        D, codes, rhist, _ = _stage("residue_coupled_refit", dl.residue_coupled_refit, D, ps, codes,
                                    ravg.values, L, rc.sparsity, eps_refit, rc.refit_sweeps, rc.workers,
                                    fixed=fixed)
        coupling_after = ravg.sq_distance(dl_residue(D, ps, codes, signed))
        entry = dict(iter=it, dl_error=dl_error, rl_loss=losses, coupling=coupling,
                     coupling_after=coupling_after, residue_change=change, net_kept=net_kept,
                     refit_error=rhist.sweep_errors[-1] if rhist.sweep_errors else math.nan)
        if report.iterations and coupling > report.iterations[-1]["coupling"] * (1 + 1e-9) + 1e-9:
            entry["coupling_increase"] = True
            logger.warning("coupling term rose at outer iteration %d", it)
        report.iterations.append(entry)
        prev_avg, prev_r2 = ravg, r2
        if not math.isnan(change) and change < rc.outer_tol:
            break

    ropt, _ = _stage("optimal_residue", optimal_residue, D, ps, rc.sparsity, eps, signed, rc.workers)
    den = denoise_patch(ps.patches, ropt.values, L)
    est = assemble_array(ps.map(den))
    if rician:
        # the estimate tracks the mean magnitude, which sits above the clean
        # intensity by the Rician bias
        est = rician_unbias(est, sigma)
    out = vol.with_data(est, clamp=True)
    report.dictionary, report.net = D, net
    report.final.update(iterations=len(report.iterations), coupling_monotone=report.coupling_monotone,
                        mean_abs_ropt=float(np.mean(ropt.magnitude)))
    return out, report


def denoise_stack(stack: Union[ImageVolume, Sequence[ImageVolume]], cfg: Optional[DenoiseConfig] = None,
                  mode: str = "2d"):
    """Denoise a list of images, or one 3D block either slice by slice (``"2d"``)
    or as a whole (``"3d"``).

    Returns ``(outputs, reports)`` in input order. Failing items do not stop the
    others; they are collected into a :class:`StackError`.
    """
    if mode not in ("2d", "3d"):
        raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")
    if isinstance(stack, ImageVolume):
        if mode == "3d":
            out, rep = denoise_volume(stack, cfg)
            return out, [rep]
        items = [ImageVolume(stack.data[:, :, z:z + 1], stack.intensity_max, stack.modality)
                 for z in range(stack.shape[2])]
        outs, reps = denoise_stack(items, cfg, "2d")
        data = np.concatenate([o.data for o in outs], axis=2)
        return stack.with_data(data), reps
    outputs, reports, failures = [], [], []
    for i, vol in enumerate(stack):
        try:
            out, rep = denoise_volume(vol, cfg)
        except DenoiseError as exc:
            failures.append((i, exc))
            out, rep = None, None
        outputs.append(out)
        reports.append(rep)
    if failures:
        raise StackError(failures, outputs)
    return outputs, reports
