"""Command-line experiment runner.

Every command reads an optional JSON config, writes its artifacts into a
fresh staging directory next to the output directory and renames it into
place only after everything (including ``manifest.json``) has been
written.  A failed run leaves no partial output behind.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import CoefficientSet, make_operator
from .geometry import Scene, validate_scene

log = logging.getLogger("jaclab")

OUT_ENV = "JACLAB_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
BUNDLED = Path(__file__).parent / "configs"


class ConfigError(Exception):
    """One or more violated config clauses; each message is one line."""

    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


class CertificationError(RuntimeError):
    pass


def numerical_errors() -> tuple[type[BaseException], ...]:
    from .jacobian import ReductionError
    from .recon import ReconstructionError
    from .solver.eigen import ConvergenceError
    from .solver.evaluate import EvaluationError
    from .solver.linalg import IndefiniteError, SingularSystemError
    from .solver.mesh import MeshError
    return (CertificationError, ReductionError, ReconstructionError, ConvergenceError, EvaluationError,
            IndefiniteError, SingularSystemError, MeshError, np.linalg.LinAlgError, FloatingPointError)


# ---------------------------------------------------------------------------
# artifact writing
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(v) else f"{float(v):.12g}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def pgm_bytes(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> bytes:
    """Plain-text (P2) 8-bit PGM.  Row 0 of ``values`` is the top row; NaN maps to 0.

    Finite values are scaled linearly onto 1..255 between ``lo`` and ``hi``
    (default: their min and max).
    """
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    img = np.zeros(values.shape, dtype=int)
    if finite.any():
        lo = float(values[finite].min()) if lo is None else lo
        hi = float(values[finite].max()) if hi is None else hi
        span = hi - lo if hi > lo else 1.0
        scaled = np.clip((values[finite] - lo) / span, 0.0, 1.0)
        img[finite] = 1 + np.rint(254 * scaled).astype(int)
    rows, cols = img.shape
    lines = ["P2", f"{cols} {rows}", "255"]
    lines += [" ".join(map(str, row)) for row in img]
    return ("\n".join(lines) + "\n").encode()


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM")
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + rows * cols], dtype=int).reshape(rows, cols)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Artifacts:
    """Staged outputs committed atomically together with their manifest."""

    def __init__(self, out_dir: Path, command: str, info: dict):
        self.out_dir = Path(out_dir)
        self.command = command
        self.info = info
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data: bytes | str) -> None:
        self.files[name] = data.encode() if isinstance(data, str) else data

    def json(self, name: str, obj) -> None:
        self.add(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self.add(name, buf.getvalue())

    def pgm(self, name: str, values: np.ndarray, lo=None, hi=None) -> None:
        self.add(name, pgm_bytes(values, lo, hi))

    def manifest(self) -> dict:
        return {"command": self.command, "version": __version__, **self.info,
                "files": {name: sha256(data) for name, data in sorted(self.files.items())}}

    def commit(self) -> Path:
        self.json("manifest.json", self.manifest())
        parent = self.out_dir.resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=f".{self.out_dir.name}.", dir=parent))
        old = None
        try:
            for name, data in self.files.items():
                with open(stage / name, "wb") as fh:
                    fh.write(data)
            if self.out_dir.exists():
                old = Path(tempfile.mkdtemp(prefix=f".{self.out_dir.name}.old.", dir=parent))
                os.rmdir(old)
                os.replace(self.out_dir, old)
            os.replace(stage, self.out_dir)
        except BaseException:
            shutil.rmtree(stage, ignore_errors=True)
            if old is not None and old.exists() and not self.out_dir.exists():
                os.replace(old, self.out_dir)
            raise
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
        return self.out_dir


def verify_manifest(out_dir) -> list[str]:
    """Names of files whose hash disagrees with the manifest (or that are unlisted/missing)."""
    out_dir = Path(out_dir)
    man = json.loads((out_dir / "manifest.json").read_text())
    bad = [n for n, h in man["files"].items() if not (out_dir / n).exists() or sha256((out_dir / n).read_bytes()) != h]
    listed = set(man["files"]) | {"manifest.json"}
    bad += sorted(p.name for p in out_dir.iterdir() if p.name not in listed)
    return bad


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = BUNDLED / (name if name.endswith(".json") else name + ".json")
    if bundled.exists():
        return bundled
    raise ConfigError(f"config: file {name!r} not found")


def load_config(name: str) -> tuple[dict, bytes]:
    path = resolve_config_path(name)
    raw = path.read_bytes()
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be an object")
    return cfg, raw


class Experiment:
    """Validated config pieces: scene, coefficients, solver settings, command blocks."""

    def __init__(self, cfg: dict, overrides: argparse.Namespace, command: str, randomized: bool = False):
        problems: list[str] = []
        self.cfg = cfg
        self.scene = None
        self.coeffs = None
        if "scene" not in cfg:
            problems.append('scene: missing field "scene"')
        else:
            try:
                self.scene = Scene.from_dict(cfg["scene"])
            except KeyError as exc:
                problems.append(f"scene: missing field {exc.args[0]!r}")
            except (TypeError, ValueError) as exc:
                problems.append(f"scene: {exc}")
            if self.scene is not None:
                problems += [f"scene: {v}" for v in validate_scene(self.scene).violations]
        if "coefficients" not in cfg:
            problems.append('coefficients: missing field "coefficients"')
        else:
            try:
                n = self.scene.N + 1 if self.scene is not None else None
                self.coeffs = CoefficientSet.from_dict(cfg["coefficients"], n)
                if not self.coeffs.lam > 0:
                    problems.append('coefficients: "lambda" must be positive')
            except KeyError as exc:
                field = exc.args[0]
                problems.append(f'coefficients: missing field "{field}"' if field == "lambda"
                                else f"coefficients: missing {field}")
            except (TypeError, ValueError, SyntaxError) as exc:
                problems.append(f"coefficients: {exc}")
        solver = cfg.get("solver", {})
        block = cfg.get(command, {}) if isinstance(cfg.get(command, {}), dict) else {}
        h = overrides.h if getattr(overrides, "h", None) is not None else block.get("h", solver.get("h"))
        if h is None:
            problems.append('solver: missing field "h"')
        elif not (isinstance(h, (int, float)) and 0 < h < 1):
            problems.append(f'solver: "h" must lie in (0, 1), got {h!r}')
        self.h = float(h) if isinstance(h, (int, float)) else None
        self.method = solver.get("method", "auto")
        if self.method not in ("auto", "cg", "direct"):
            problems.append(f'solver: "method" must be auto, cg or direct, got {self.method!r}')
        seed = overrides.seed if getattr(overrides, "seed", None) is not None else cfg.get("seed")
        if randomized and seed is None:
            problems.append('seed: missing field "seed" (or pass --seed)')
        elif seed is not None and not isinstance(seed, int):
            problems.append(f'seed: must be an integer, got {seed!r}')
        self.seed = seed
        self.block = block
        if problems:
            raise ConfigError(problems)

    def mesh(self):
        from .solver.mesh import build_mesh
        return build_mesh(self.scene, self.h)


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "jaclab_out")) / command


def _raster(scene: Scene, n: int):
    x0, y0, x1, y1 = scene.outer.bbox()
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y1, y0, n)            # top row first
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    regions = scene.region_of(pts)
    inside = regions > 0
    return pts, regions, inside, (n, n)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_frames(args) -> tuple[dict, Artifacts]:
    from .frames import hd_frame, sphere_frame
    d, k = args.dim, args.samples
    if d < 2 or k < 1:
        raise ConfigError("frames: need --dim >= 2 and --samples >= 1")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(k, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    if d in (2, 4, 8):
        H = sphere_frame(d, x)
        err = np.abs(np.einsum("nij,nkj->nik", H, H) - np.eye(d)).max(axis=(1, 2))
        det = np.linalg.det(H)
        rank = np.linalg.matrix_rank(H)
        expected_det = 1.0
    else:
        H = hd_frame(d, x)
        tang = H[:, 1:, :d]
        err = np.abs(np.einsum("nij,nj->ni", tang, x)).max(axis=1)
        det = np.linalg.det(H)
        rank = np.linalg.matrix_rank(np.concatenate([x[:, None, :], tang], axis=1))
        expected_det = 1.0
    summary = {"dim": d, "samples": k, "seed": seed, "frame": "sphere_frame" if d in (2, 4, 8) else "hd_frame",
               "max_gram_err": float(err.max()), "max_det_err": float(np.abs(det - expected_det).max()),
               "min_rank": int(rank.min()), "max_rank": int(rank.max())}
    art = Artifacts(args.out or default_out("frames"), "frames check", {"seed": seed, "dim": d, "samples": k})
    art.csv("frames.csv", ["id", "gram_err", "det", "rank"], zip(range(k), err, det, rank))
    art.json("summary.json", summary)
    return summary, art


def cmd_solve(args, exp: Experiment, cfg_hash: str) -> tuple[dict, Artifacts]:
    from .coefficients import expression
    from .solver.evaluate import Sampler
    from .solver.fem import DirichletProblem
    bc = args.bc or exp.block.get("bc") or exp.cfg.get("solver", {}).get("bc")
    if bc is None:
        raise ConfigError('solve: missing field "bc" (or pass --bc)')
    try:
        g = expression(bc)
        g(np.zeros((1, 2)))
    except Exception as exc:
        raise ConfigError(f"solve: bad --bc expression {bc!r} ({exc})") from exc
    mesh = exp.mesh()
    op = make_operator(exp.coeffs)
    u = DirichletProblem(op, mesh, exp.method).solve(g, bc)
    regions = np.zeros(mesh.n_nodes, dtype=int)
    for k in range(3):
        regions[mesh.triangles[:, k]] = np.maximum(regions[mesh.triangles[:, k]], mesh.region)
    vals = u.nodal()
    n = int(exp.block.get("raster", 128))
    pts, reg, inside, shape = _raster(exp.scene, n)
    img = np.full(len(pts), np.nan)
    img[inside] = Sampler.build(mesh, pts[inside], reg[inside]).values([u])[:, 0]
    summary = {"h": exp.h, "bc": bc, "nodes": int(mesh.n_nodes), "elements": int(mesh.n_elements),
               "residual": u.residual, "min_u": float(np.nanmin(vals)), "max_u": float(np.nanmax(vals))}
    art = Artifacts(args.out or default_out("solve"), "solve", {"config_sha256": cfg_hash, "h": exp.h, "bc": bc})
    art.csv("nodal.csv", ["x", "y", "region", "u"],
            ((p[0], p[1], r, v) for p, r, v in zip(mesh.points, regions, vals)))
    art.pgm("u.pgm", img.reshape(shape))
    art.json("summary.json", summary)
    return summary, art


def cmd_construct(args, exp: Experiment, cfg_hash: str) -> tuple[dict, Artifacts]:
    from .construct import build_admissible_family
    sigma = args.sigma if args.sigma is not None else exp.block.get("sigma", 0.5)
    m = args.dict_size if args.dict_size is not None else exp.block.get("dict_size", 32)
    if not (isinstance(sigma, (int, float)) and sigma > 0):
        raise ConfigError(f'construct: "sigma" must be positive, got {sigma!r}')
    if not (isinstance(m, int) and m >= 2):
        raise ConfigError(f'construct: "dict_size" must be an integer >= 2, got {m!r}')
    mesh = exp.mesh()
    fam = build_admissible_family(exp.scene, exp.coeffs, mesh, sigma=float(sigma), dict_size=m, seed=exp.seed,
                                  reduce_to=exp.block.get("reduce_to"))
    summary = fam.summary()
    prov = {"summary": summary, "centers": [c.to_dict() for c in fam.centers],
            "coefficients": fam.coeffs, "traces": [u.trace for u in fam.fields],
            "shift": fam.shift.to_dict() if fam.shift else None, "provenance": fam.provenance}
    art = Artifacts(args.out or default_out("construct"), "construct",
                    {"config_sha256": cfg_hash, "seed": exp.seed, "sigma": sigma, "dict_size": m, "h": exp.h})
    art.json("family.json", prov)
    art.csv("balls.csv", ["ball", "x", "y", "region", "round", "cover_eps", "eps", "members", "certified",
                          "fit_error", "min_pre_det", "min_post_det"],
            ((i, c.anchor[0], c.anchor[1], c.region, c.round, c.cover_eps, c.eps, c.members, c.certified,
              c.fit_error, c.min_pre_det, c.min_post_det) for i, c in enumerate(fam.centers)))
    if not fam.certified:
        summary["error"] = "certification failed"
    return summary, art


def _jac_family(exp: Experiment):
    from .coefficients import expression
    from .solver.fem import DirichletProblem
    traces = exp.block.get("traces") or exp.cfg.get("jac", {}).get("traces") or ["x", "y", "1"]
    try:
        fns = [expression(t) for t in traces]
        for f in fns:
            f(np.zeros((1, 2)))
    except Exception as exc:
        raise ConfigError(f"jac: bad trace expression ({exc})") from exc
    mesh = exp.mesh()
    op = make_operator(exp.coeffs)
    return mesh, op, DirichletProblem(op, mesh, exp.method).solve_many(fns, list(traces))


def cmd_jac_report(args, exp: Experiment, cfg_hash: str) -> tuple[dict, Artifacts]:
    from .frames import build_frame_field
    from .jacobian import FamilyProbe, minor_sum, ranks
    from .solver.evaluate import Sampler
    mesh, op, us = _jac_family(exp)
    probe = FamilyProbe.standard(mesh)
    rep = probe.report(us, build_frame_field(exp.scene), op)
    n = int(exp.block.get("raster", 96))
    pts, reg, inside, shape = _raster(exp.scene, n)
    keep = inside & (exp.scene.interface_distance(pts) > 2 * mesh.h) if exp.scene.N else inside
    img = np.full(len(pts), np.nan)
    if keep.any():
        J = Sampler.build(mesh, pts[keep], reg[keep]).jacobians(us)
        rk = ranks(J)
        m = np.where(rk == 3, minor_sum(J), 0.0)
        img[keep] = np.log10(np.maximum(m, 1e-16))
    s = rep.samples
    summary = rep.summary()
    summary.update({"h": exp.h, "traces": [u.trace for u in us]})
    art = Artifacts(args.out or default_out("jac_report"), "jac report", {"config_sha256": cfg_hash, "h": exp.h})
    art.csv("samples.csv", ["x", "y", "side", "rank", "margin"],
            zip(s.points[:, 0], s.points[:, 1], s.sides, rep.rank, rep.margins))
    art.pgm("log10_margin.pgm", img.reshape(shape))
    art.json("summary.json", summary)
    if not rep.admissible:
        summary["error"] = "family is not admissible on the sample set"
    return summary, art


def cmd_reduce(args, exp: Experiment, cfg_hash: str, draws: int | None = None) -> tuple[dict, Artifacts]:
    from .jacobian import FamilyProbe, failure_rate, fast_margin, p_star, ranks, whitney_reduce
    mesh, op, us = _jac_family(exp)
    jac_block = exp.cfg.get("jac", {})
    target = exp.block.get("target", jac_block.get("target", p_star()))
    probe = FamilyProbe.standard(mesh)
    J0 = probe.jacobians(us)
    res = whitney_reduce(us, seed=exp.seed, target=int(target), probe=probe)
    stages = [{"P_from": len(us) - i, "P_to": len(us) - i - 1, "a": st.a, "margin": st.margin,
               "attempts": st.attempts, "rejected": len(st.rejected), "rank_sandwich": st.sandwich_ok}
              for i, st in enumerate(res.steps)]
    rk0 = ranks(J0)
    out = {"seed": exp.seed, "P0": len(us), "target": int(target),
           "initial_margin": float(np.where(rk0 == 3, fast_margin(J0), 0.0).min()), "stages": stages}
    if draws:
        rate, sandwich = failure_rate(J0, int(draws), seed=exp.seed)
        out["monte_carlo"] = {"draws": int(draws), "failure_rate": rate, "rank_sandwich": sandwich}
    name = "reduce" if draws else "jac_reduce"
    art = Artifacts(args.out or default_out(name), "reduce" if draws else "jac reduce",
                    {"config_sha256": cfg_hash, "seed": exp.seed, "h": exp.h, "draws": draws or 0})
    art.json("reduction.json", out)
    return out, art


def cmd_recon(args, exp: Experiment, cfg_hash: str) -> tuple[dict, Artifacts]:
    from .recon import DEFAULT_TRACES, Phantom, evaluate_against, internal_data, reconstruct
    block = exp.block
    problems = []
    ph = block.get("phantom")
    if not isinstance(ph, dict) or "gammas" not in ph:
        problems.append('recon: missing field "phantom.gammas"')
    if "anchor" not in block:
        problems.append('recon: missing field "anchor"')
    if problems:
        raise ConfigError(problems)
    try:
        phantom = Phantom(exp.scene, ph["gammas"], tuple(block["anchor"]), float(block.get("anchor_value", 1.0)),
                          exp.coeffs.lam)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"recon: {exc}") from exc
    traces = tuple(block.get("traces", DEFAULT_TRACES))
    mesh = exp.mesh()
    us = internal_data(phantom, mesh, traces)
    res = reconstruct(us, exp.scene, phantom.anchor, phantom.anchor_value)
    errors = evaluate_against(res, phantom)
    n = int(block.get("raster", 128))
    pts, reg, inside, shape = _raster(exp.scene, n)
    true = np.full(len(pts), np.nan)
    rec = np.full(len(pts), np.nan)
    true[inside] = phantom.gamma(pts[inside], reg[inside])
    rec[inside] = res.gamma(pts[inside], reg[inside])
    lo = float(np.nanmin(np.concatenate([true, rec])))
    hi = float(np.nanmax(np.concatenate([true, rec])))
    report = {"jumps": {k: v.to_dict() for k, v in res.jumps.items()}, "errors": errors,
              "anchor": list(phantom.anchor), "anchor_value": phantom.anchor_value, "h": exp.h,
              "traces": list(traces), "region_offsets": {str(k): v for k, v in res.offsets.items()}}
    art = Artifacts(args.out or default_out("recon"), "recon", {"config_sha256": cfg_hash, "h": exp.h})
    art.json("recon.json", report)
    art.csv("gamma.csv", ["x", "y", "region", "gamma_true", "gamma_recovered"],
            ((p[0], p[1], r, t, g) for p, r, t, g, i in zip(pts, reg, true, rec, inside) if i))
    art.pgm("gamma_true.pgm", true.reshape(shape), lo, hi)
    art.pgm("gamma_recovered.pgm", rec.reshape(shape), lo, hi)
    return report, art


def cmd_poincare(args) -> tuple[dict, Artifacts]:
    from .solver.eigen import annulus_eigenvalue, poincare_check
    t, s = args.t, args.s
    if not 0 < t < s:
        raise ConfigError(f"poincare: need 0 < t < s, got t={t}, s={s}")
    seed = 0 if args.seed is None else args.seed
    rho = annulus_eigenvalue(t, s)
    ref = annulus_eigenvalue(2 * t, 2 * s)
    pairs = poincare_check(t, s, n_funcs=args.funcs, seed=seed)
    out = {"t": t, "s": s, "seed": seed, "rho": rho, "rho_scaled_2x": ref, "scaling_ratio": rho / ref,
           "thin_limit": math.pi ** 2 / (s - t) ** 2,
           "checks": [{"l2": a, "grad_over_rho": b, "ok": a <= b} for a, b in pairs]}
    art = Artifacts(args.out or default_out("poincare"), "poincare", {"seed": seed, "t": t, "s": s})
    art.json("poincare.json", out)
    if not all(c["ok"] for c in out["checks"]):
        out["error"] = "Poincare inequality violated"
    return out, art


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jaclab", description="Non-vanishing Jacobian experiments on piecewise domains.")
    p.add_argument("--version", action="version", version=f"jaclab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", nargs="?", help="config path or bundled config name")
            sp.add_argument("--config", dest="config_opt")
            sp.add_argument("--h", type=float)
        sp.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int)

    fr = sub.add_parser("frames", help="frame formula checks")
    fr.add_argument("action", choices=["check"])
    fr.add_argument("--dim", type=int, required=True)
    fr.add_argument("--samples", type=int, default=10000)
    common(fr, config=False)

    so = sub.add_parser("solve", help="Dirichlet solve")
    common(so)
    so.add_argument("--bc")

    co = sub.add_parser("construct", help="build an admissible family")
    common(co)
    co.add_argument("--sigma", type=float)
    co.add_argument("--dict-size", type=int)

    ja = sub.add_parser("jac", help="Jacobian margin report or Whitney reduction")
    ja.add_argument("action", choices=["report", "reduce"])
    common(ja)

    re_ = sub.add_parser("reduce", help="Whitney reduction with Monte-Carlo failure rate")
    common(re_)
    re_.add_argument("--draws", type=int)

    rc = sub.add_parser("recon", help="conductivity reconstruction from internal data")
    common(rc)

    po = sub.add_parser("poincare", help="annulus eigenvalue and Poincare check")
    po.add_argument("--t", type=float, default=0.5)
    po.add_argument("--s", type=float, default=0.75)
    po.add_argument("--funcs", type=int, default=10)
    common(po, config=False)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with np.errstate(invalid="ignore", divide="ignore"):
            summary, art = _dispatch(args)
        art.commit()
    except ConfigError as exc:
        for msg in exc.problems:
            print(f"jaclab: config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except numerical_errors() as exc:
        print(f"jaclab: numerical failure: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(_jsonable({"out": str(art.out_dir), **{k: v for k, v in summary.items()
                                                             if not isinstance(v, (list, dict))}}), sort_keys=True))
    if "error" in summary:
        print(f"jaclab: numerical failure: {summary['error']}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _dispatch(args):
    if args.command == "frames":
        return cmd_frames(args)
    if args.command == "poincare":
        return cmd_poincare(args)
    name = getattr(args, "config_opt", None) or args.config
    if name is None:
        raise ConfigError("config: no config given (positional or --config)")
    cfg, raw = load_config(name)
    h = sha256(raw)
    if args.command == "solve":
        return cmd_solve(args, Experiment(cfg, args, "solve"), h)
    if args.command == "construct":
        return cmd_construct(args, Experiment(cfg, args, "construct", randomized=True), h)
    if args.command == "jac" and args.action == "report":
        return cmd_jac_report(args, Experiment(cfg, args, "jac"), h)
    if args.command == "jac":
        return cmd_reduce(args, Experiment(cfg, args, "jac", randomized=True), h)
    if args.command == "reduce":
        exp = Experiment(cfg, args, "reduce", randomized=True)
        draws = args.draws if args.draws is not None else exp.block.get("draws", 1000)
        if not (isinstance(draws, int) and draws > 0):
            raise ConfigError(f'reduce: "draws" must be a positive integer, got {draws!r}')
        return cmd_reduce(args, exp, h, draws)
    if args.command == "recon":
        return cmd_recon(args, Experiment(cfg, args, "recon"), h)
    raise ConfigError(f"unknown command {args.command!r}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
