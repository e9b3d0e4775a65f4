"""Mesh-wide estimation, error norms and convergence studies."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffgeo, oracle
from .fitting import FitConfig, fit_heights, iterative_fits
from .mesh import Mesh, vertex_normals_averaged

logger = logging.getLogger(__name__)

__all__ = [
    "EstimationError",
    "VertexDiff",
    "Estimates",
    "ErrorReport",
    "RunConfig",
    "estimate_all",
    "error_norms",
    "convergence_rate",
    "EXACT_RATE",
    "make_mesh",
    "run_convergence",
    "run_experiment",
    "write_vertex_csv",
    "write_summary_csv",
]

# sentinel for a rate computed from an exactly zero error
EXACT_RATE = "exact"

QUANTITIES = ("kappa1", "kappa2", "kappaH", "kappaG")


class EstimationError(RuntimeError):
    """Some vertices could not be fitted; ``failed`` maps ids to causes."""

    def __init__(self, failed):
        self.failed = dict(failed)
        ids = sorted(self.failed)
        shown = ", ".join(str(i) for i in ids[:20])
        more = "" if len(ids) <= 20 else f" (+{len(ids) - 20} more)"
        super().__init__(f"fit failed at {len(ids)} vertices: {shown}{more}")


@dataclass(frozen=True)
class VertexDiff:
    """Differential quantities at one vertex; ``failure`` is None on success."""

    vertex: int
    normal: np.ndarray
    kappa1: float
    kappa2: float
    dir1: np.ndarray
    dir2: np.ndarray
    kappaH: float
    kappaG: float
    tensor: np.ndarray
    umbilic: bool
    achieved_degree: int
    ring: float
    cond: float
    failure: str | None = None

    @property
    def ok(self):
        return self.failure is None


@dataclass
class Estimates:
    """Per-vertex estimates stored as arrays; indexing yields a :class:`VertexDiff`.

    Rows of failed vertices hold NaN and are listed in ``failures``.
    """

    normals: np.ndarray
    kappa: np.ndarray
    dir1: np.ndarray
    dir2: np.ndarray
    kappaH: np.ndarray
    kappaG: np.ndarray
    tensor: np.ndarray
    umbilic: np.ndarray
    achieved: np.ndarray
    rings: np.ndarray
    cond: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    frames: np.ndarray
    failures: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.normals)

    @property
    def failed(self):
        mask = np.zeros(len(self), dtype=bool)
        mask[list(self.failures)] = True
        return mask

    def __getitem__(self, i):
        i = int(i)
        return VertexDiff(
            vertex=i, normal=self.normals[i], kappa1=float(self.kappa[i, 0]),
            kappa2=float(self.kappa[i, 1]), dir1=self.dir1[i], dir2=self.dir2[i],
            kappaH=float(self.kappaH[i]), kappaG=float(self.kappaG[i]),
            tensor=self.tensor[i], umbilic=bool(self.umbilic[i]),
            achieved_degree=int(self.achieved[i]), ring=float(self.rings[i]),
            cond=float(self.cond[i]), failure=self.failures.get(i),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def raise_on_failure(self):
        if self.failures:
            raise EstimationError(self.failures)


def estimate_all(mesh, config=None, approx_normals=None):
    """Normals, curvatures and principal directions at every vertex.

    Averaged normals seed the local frames, a height function is fitted
    at each vertex, and its gradient gives the normal. With
    ``config.iterative`` the Hessian is refitted from the neighbors'
    normals. The result is converted to global quantities.

    Failed vertices are recorded in ``Estimates.failures`` with a cause;
    call :meth:`Estimates.raise_on_failure` to turn them into an error.
    """
    config = config or FitConfig()
    if approx_normals is None:
        approx_normals = vertex_normals_averaged(mesh)
    fits = fit_heights(mesh, approx_normals, config)
    grad = fits.grad
    hess = fits.hess
    frames = fits.frames
    _, normals = diffgeo.normal_from_gradient(grad, frames)
    failures = dict(fits.reasons)
    if config.iterative:
        normals_in = np.where(fits.failed[:, None], np.nan, normals)
        hess_it, it_failed = iterative_fits(fits, normals_in, config)
        hess = np.where(fits.failed[:, None, None], hess, hess_it)
        for i in np.flatnonzero(it_failed & ~fits.failed):
            failures[int(i)] = "iterative normal fit failed"
    shape = diffgeo.symmetric_shape_operator(grad, hess)
    kappa, d1, d2 = diffgeo.principal(shape)
    d1 = (frames @ d1[..., None])[..., 0]
    d2 = (frames @ d2[..., None])[..., 0]
    kh, kg = diffgeo.mean_gaussian(grad, hess)
    _, tensor = diffgeo.curvature_tensor(grad, hess, frames)
    est = Estimates(
        normals=normals, kappa=kappa, dir1=d1, dir2=d2, kappaH=kh, kappaG=kg,
        tensor=tensor, umbilic=diffgeo.umbilic_mask(kappa), achieved=fits.achieved,
        rings=fits.rings, cond=fits.cond, grad=grad, hess=hess, frames=frames,
        failures=failures,
    )
    if failures:
        bad = np.array(sorted(failures))
        for arr in (est.normals, est.kappa, est.dir1, est.dir2, est.kappaH, est.kappaG,
                    est.tensor, est.grad, est.hess):
            arr[bad] = np.nan
        logger.warning("%d vertices failed", len(bad))
    return est


# ----------------------------------------------------------------------
# error norms

@dataclass
class ErrorReport:
    """Relative L2 and L-infinity errors of one estimate against exact values.

    ``errors`` maps a quantity name to ``(l2, linf)``. Direction errors are
    sign-insensitive and use only vertices where the exact surface is not
    umbilic; they are None if there are no such vertices.
    """

    n_vertices: int
    n_failed: int
    errors: dict
    normal_l2: float
    normal_linf: float
    dir_errors: dict
    degenerate: tuple = ()
    wall_time: float = 0.0

    def l2(self, name):
        return self.errors[name][0]

    def linf(self, name):
        return self.errors[name][1]


def _rel_l2(est, ex):
    num = float(np.linalg.norm(est - ex))
    den = float(np.linalg.norm(ex))
    if den == 0.0:
        return num, num != 0.0
    return num / den, False


def _rel_linf(est, ex):
    mag = np.abs(ex)
    eps = 0.01 * float(mag.max()) if mag.size else 0.0
    diff = np.abs(est - ex)
    if eps == 0.0:
        return float(diff.max(initial=0.0)), bool(np.any(diff > 0.0))
    return float((diff / np.maximum(mag, eps)).max()), False


def _vec_errors(est, ex):
    d = np.linalg.norm(est - ex, axis=-1)
    return float(np.sqrt(np.mean(d * d))), float(d.max(initial=0.0))


def error_norms(estimates, exacts, include=None, wall_time=0.0):
    """Relative errors of ``estimates`` against ``exacts``.

    Parameters
    ----------
    estimates : Estimates
    exacts : oracle.ExactQuantities
    include : (V,) bool array_like, optional
        Vertices to use; failed vertices are always excluded and counted.
    """
    n = len(estimates)
    if len(exacts.normal) != n:
        raise ValueError(f"length mismatch: {n} estimates vs {len(exacts.normal)} exact values")
    use = ~estimates.failed
    if include is not None:
        use &= np.asarray(include, dtype=bool)
    est_vals = {
        "kappa1": estimates.kappa[use, 0], "kappa2": estimates.kappa[use, 1],
        "kappaH": estimates.kappaH[use], "kappaG": estimates.kappaG[use],
    }
    ex_vals = {
        "kappa1": exacts.kappa[use, 0], "kappa2": exacts.kappa[use, 1],
        "kappaH": exacts.kappaH[use], "kappaG": exacts.kappaG[use],
    }
    errors = {}
    degenerate = []
    for q in QUANTITIES:
        l2, bad2 = _rel_l2(est_vals[q], ex_vals[q])
        linf, badi = _rel_linf(est_vals[q], ex_vals[q])
        errors[q] = (l2, linf)
        if bad2 or badi:
            degenerate.append(q)
    nl2, nlinf = _vec_errors(estimates.normals[use], exacts.normal[use])
    dir_errors = {}
    sel = use & ~exacts.umbilic
    for q in ("dir1", "dir2"):
        if not sel.any():
            dir_errors[q] = None
            continue
        e, x = getattr(estimates, q)[sel], getattr(exacts, q)[sel]
        flip = np.where((e * x).sum(axis=-1) < 0.0, -1.0, 1.0)
        dir_errors[q] = _vec_errors(e * flip[:, None], x)
    return ErrorReport(
        n_vertices=int(use.sum()), n_failed=int(estimates.failed.sum()), errors=errors,
        normal_l2=nl2, normal_linf=nlinf, dir_errors=dir_errors,
        degenerate=tuple(degenerate), wall_time=wall_time,
    )


def convergence_rate(errors, levels=None):
    """``log2(e_first / e_last) / (L - 1)`` with ``L`` levels.

    ``L`` defaults to ``len(errors)``. A zero error gives :data:`EXACT_RATE`.

    Examples
    --------
    >>> convergence_rate([4.0, 1.0])
    2.0
    """
    errors = [float(e) for e in errors]
    nlev = len(errors) if levels is None else int(levels)
    if nlev < 2 or len(errors) < 2:
        raise ValueError("a convergence rate needs at least two levels")
    if any(e < 0.0 or not math.isfinite(e) for e in errors):
        raise ValueError(f"errors must be finite and nonnegative, got {errors}")
    if errors[0] == 0.0 or errors[-1] == 0.0:
        return EXACT_RATE
    return math.log2(errors[0] / errors[-1]) / (nlev - 1)


# ----------------------------------------------------------------------
# experiments

@dataclass(frozen=True)
class RunConfig:
    """One experiment: a surface hierarchy, degrees and fitting switches."""

    command: str = "convergence"
    surface: str = "sphere"
    style: str = "irregular"
    levels: int = 4
    start_level: int = 0
    degrees: tuple = (1, 2, 3, 4)
    fit: FitConfig = FitConfig()
    seed: int = 0
    out: str | None = None
    vertex_csv: bool = True

    def __post_init__(self):
        for d in self.degrees:
            if not 1 <= int(d) <= 6:
                raise ValueError(f"degree must be within 1..6, got {d}")
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        oracle.surface_by_name(self.surface)


def make_mesh(surface, style="irregular", level=0, seed=0):
    """Mesh of a named test surface at a refinement level, and its oracle.

    ``style`` matters for graphs (irregular/semiregular) and the torus
    (irregular means jittered vertices).
    """
    surf = oracle.surface_by_name(surface)
    if surf.name == "sphere":
        return oracle.gen_sphere_mesh(level), surf
    if surf.name == "torus":
        if style not in ("irregular", "semiregular", "structured"):
            raise ValueError(f"unknown style {style!r}")
        return oracle.gen_torus_mesh(level, jitter=(style == "irregular"), seed=seed), surf
    return oracle.gen_graph_mesh(surf, style, level, seed=seed), surf


_ERR_COLUMNS = (
    "normal_l2", "normal_linf",
    "kappa1_l2", "kappa1_linf", "kappa2_l2", "kappa2_linf",
    "kappaH_l2", "kappaH_linf", "kappaG_l2", "kappaG_linf",
)


def _summary_row(surface, style, degree, level, mesh, est, rep, threshold):
    row = {
        "surface": surface, "style": style, "degree": degree, "level": level,
        "n_vertices": mesh.n_vertices, "n_failed": rep.n_failed,
        "mean_edge": mesh.mean_edge_length(),
        "normal_l2": rep.normal_l2, "normal_linf": rep.normal_linf,
    }
    for q in QUANTITIES:
        row[f"{q}_l2"], row[f"{q}_linf"] = rep.errors[q]
    finite = est.cond[~est.failed]
    row["max_cond"] = float(finite.max(initial=0.0))
    row["n_cond_over"] = int((finite >= threshold).sum())
    row["degenerate"] = ";".join(rep.degenerate)
    return row


def run_convergence(config, out_dir=None):
    """Run every (degree, level) pair; returns summary rows with rates.

    Per-vertex CSV files are written to ``out_dir`` when it is given and
    ``config.vertex_csv`` is set.
    """
    rows = []
    levels = range(config.start_level, config.start_level + config.levels)
    meshes = {lv: make_mesh(config.surface, config.style, lv, config.seed) for lv in levels}
    for d in config.degrees:
        fit = replace(config.fit, degree=int(d))
        block = []
        for lv in levels:
            mesh, surf = meshes[lv]
            t0 = time.perf_counter()
            est = estimate_all(mesh, fit)
            ex = oracle.exact_at(surf, mesh.vertices)
            rep = error_norms(est, ex, wall_time=time.perf_counter() - t0)
            logger.info("degree %d level %d: %d vertices, %.2fs", d, lv, mesh.n_vertices,
                        rep.wall_time)
            block.append(_summary_row(config.surface, config.style, int(d), lv, mesh, est, rep,
                                      fit.cond_threshold))
            if out_dir is not None and config.vertex_csv:
                write_vertex_csv(Path(out_dir) / f"vertices_d{d}_L{lv}.csv", mesh, est)
        for col in _ERR_COLUMNS:
            if len(block) < 2:
                rate = ""
            else:
                try:
                    rate = convergence_rate([block[0][col], block[-1][col]], len(block))
                except ValueError:
                    rate = ""
            for row in block:
                row[f"rate_{col}"] = rate
        rows.extend(block)
    return rows


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


VERTEX_COLUMNS = (
    "vertex_id", "x", "y", "z", "nx", "ny", "nz", "kappa1", "kappa2", "kappaH", "kappaG",
    "d1x", "d1y", "d1z", "d2x", "d2y", "d2z", "achieved_degree", "ring", "cond", "status",
)


def write_vertex_csv(path, mesh, est):
    """Per-vertex table; failed vertices carry ``FAILED`` in numeric columns."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(VERTEX_COLUMNS)
            for i in range(mesh.n_vertices):
                x = mesh.vertices[i]
                if i in est.failures:
                    w.writerow([i, *map(_fmt, x)] + ["FAILED"] * 16
                               + [f"failed: {est.failures[i]}"])
                    continue
                vals = [*est.normals[i], *est.kappa[i], est.kappaH[i], est.kappaG[i],
                        *est.dir1[i], *est.dir2[i]]
                status = "umbilic" if est.umbilic[i] else "ok"
                w.writerow([i, *map(_fmt, x), *map(_fmt, vals), int(est.achieved[i]),
                            _fmt(est.rings[i]), _fmt(est.cond[i]), status])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_summary_csv(path, rows):
    path = Path(path)
    if not rows:
        raise ValueError("no summary rows to write")
    cols = list(rows[0])
    try:
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt(v) for k, v in row.items()})
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def run_experiment(config):
    """Run a convergence study and write ``summary.csv`` (plus per-vertex files).

    Returns the summary rows.
    """
    if config.out is None:
        raise ValueError("run_experiment needs an output directory")
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rows = run_convergence(config, out)
    write_summary_csv(out / "summary.csv", rows)
    return rows


def estimate_mesh_file(path, config, out):
    """Estimate on a mesh file and write the per-vertex CSV; returns the estimates."""
    from .mesh import load_mesh

    mesh = load_mesh(path)
    est = estimate_all(mesh, config)
    write_vertex_csv(out, mesh, est)
    return mesh, est
