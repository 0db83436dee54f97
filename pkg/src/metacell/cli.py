"""Command line driver for the cell design pipeline.

Each subcommand reads one config file, writes its artifacts into a fresh
run-<timestamp> directory under --out and finishes with a manifest.txt
listing the inputs, the seed and a sha256 per output, so a run can be
checked for bitwise reproducibility after the fact.

Exit codes: 0 on success, 1 on any runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import MetacellError, ValidationError


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def make_run_dir(out_dir, stamp: str | None = None) -> Path:
    """Fresh run-<timestamp> directory; suffixes -1, -2, ... on collision."""
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    if stamp is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    candidate = base / f"run-{stamp}"
    n = 0
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            n += 1
            candidate = base / f"run-{stamp}-{n}"


class Manifest:
    """What went in and what came out, hash-stamped."""

    def __init__(self, command: str, cfg: RunConfig, config_path):
        self.command = command
        self.seed = cfg.rng_seed
        self.threads = cfg.threads
        self.inputs: list[tuple[str, Path]] = []
        if config_path is not None:
            self.inputs.append(("config", Path(config_path)))

    def add_input(self, label: str, path) -> None:
        self.inputs.append((label, Path(path)))

    def write(self, run_dir: Path) -> Path:
        lines = [
            f"command {self.command}",
            f"seed {self.seed}",
            f"threads {self.threads}",
        ]
        for label, path in self.inputs:
            lines.append(f"input {label} {path} sha256 {_sha256(path)}")
        out_path = run_dir / "manifest.txt"
        for path in sorted(run_dir.iterdir()):
            if path == out_path:
                continue
            lines.append(f"output {path.name} sha256 {_sha256(path)}")
        out_path.write_text("\n".join(lines) + "\n")
        return out_path


def _load_database(cfg: RunConfig, manifest: Manifest):
    from .pipeline import Database

    path = cfg.path("database")
    manifest.add_input("database", path)
    return Database.load(path)


def _load_model(cfg: RunConfig, manifest: Manifest):
    from .latentmodel import LatentModel

    path = cfg.path("model")
    manifest.add_input("model", path)
    return LatentModel.load_weights(path)


def _load_problem(cfg: RunConfig, manifest: Manifest):
    from .macroopt import load_problem

    path = cfg.path("problem")
    manifest.add_input("problem", path)
    return load_problem(path)


def _db_bounds(db) -> np.ndarray:
    pm = db.property_matrix()
    return np.stack([pm.min(axis=0), pm.max(axis=0)], axis=1)


def _write_metric_csv(path: Path, rows: list[tuple[str, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for name, value in rows:
            fh.write(f"{name},{repr(float(value))}\n")


# --- subcommands ---------------------------------------------------------


def cmd_gen_db(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render
    from .pipeline import GrowthParams, default_seed_set, grow_database

    g = cfg.section("growth")
    params = GrowthParams(
        iterations=g["iterations"],
        batch=g["batch"],
        neighbor_radius=g["neighbor_radius"],
        sdf_resolution=g["sdf_resolution"],
        retries=g["retries"],
    )
    db = grow_database(
        default_seed_set(),
        rng_seed=cfg.rng_seed,
        params=params,
        latent_dim=cfg.section("training")["latent_dim"],
    )
    db.save(run_dir / "database.txt")
    with open(run_dir / "properties.csv", "w") as fh:
        fh.write("record_id,c11,c12,c22,c33\n")
        for rec in db.records:
            vals = ",".join(repr(float(v)) for v in rec.props.as_array())
            fh.write(f"{rec.id},{vals}\n")
    render.property_scatter_svg(run_dir / "properties.svg", db.property_matrix())
    print(f"grew {len(db)} records")


def cmd_train(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render
    from .latentmodel import TrainingConfig, train, validation_indices

    db = _load_database(cfg, manifest)
    t = cfg.section("training")
    tcfg = TrainingConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        optimizer=t["optimizer"],
        regression_weight=t["regression_weight"],
        mc_samples=t["mc_samples"],
        validation_fraction=t["validation_fraction"],
        rng_seed=cfg.rng_seed,
        torch_threads=cfg.threads,
    )
    model, history = train(db, tcfg)
    model.save_weights(run_dir / "model.bin")
    history.save_csv(run_dir / "loss.csv")
    epochs = history.rows[:, 0]
    render.curve_svg(
        run_dir / "loss.svg",
        epochs,
        {
            "recon": history.rows[:, 1],
            "kl": history.rows[:, 2],
            "reg": history.rows[:, 3],
            "total": history.rows[:, 4],
        },
        xlabel="epoch",
        ylabel="loss",
        logy=True,
    )

    # held-out agreement: pixels after reconstruction, properties after regression
    val = validation_indices(len(db), tcfg)
    agreements = []
    prop_errors = []
    for i in val:
        rec = db.records[int(i)]
        recon = model.reconstruct(rec.micro)
        agreements.append(np.mean(recon.cells == rec.micro.cells))
        post = model.encode(rec.micro)
        pred = model.predict_properties(post.mean).as_array()
        true = rec.props.as_array()
        prop_errors.append(np.linalg.norm(pred - true) / max(np.linalg.norm(true), 1e-12))
    _write_metric_csv(
        run_dir / "metrics.csv",
        [
            ("validation_count", float(len(val))),
            ("median_pixel_agreement", float(np.median(agreements))),
            ("median_property_rel_error", float(np.median(prop_errors))),
            ("first_epoch_total", float(history.rows[0, 4])),
            ("last_epoch_total", float(history.rows[-1, 4])),
        ],
    )
    print(
        f"trained {tcfg.epochs} epochs; median val agreement "
        f"{float(np.median(agreements)):.4f}"
    )


def cmd_analyze(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render
    from .homogenization import homogenize
    from .latentops import fit_pca, semantic_arrow, traverse
    from .pipeline import annotate_latents

    db = _load_database(cfg, manifest)
    model = _load_model(cfg, manifest)
    annotate_latents(db, model)
    a = cfg.section("analyze")

    latents = db.latent_matrix()
    pca = fit_pca(latents, n_components=2)
    with open(run_dir / "pca.csv", "w") as fh:
        fh.write("component,explained_variance_ratio\n")
        for k, v in enumerate(pca.explained_variance_ratio):
            fh.write(f"{k},{repr(float(v))}\n")
    props = db.property_matrix()
    render.latent_scatter_svg(run_dir / "latent_pca.svg", pca.project(latents), color=props[:, 0])

    arrows = {
        "c11": semantic_arrow(db, lambda r: r.props.c11, mode="quantile", q=a["quantile"], criterion="c11"),
        "anisotropy": semantic_arrow(
            db,
            lambda r: r.props.c11 / max(r.props.c22, 1e-12),
            mode="ratio",
            ratio_threshold=a["ratio_threshold"],
            criterion="c11/c22",
        ),
    }
    rng = np.random.default_rng(cfg.rng_seed)
    starts = rng.choice(len(db.records), size=min(a["starts"], len(db.records)), replace=False)
    with open(run_dir / "traversals.csv", "w") as fh:
        fh.write("arrow,start_record,step,c11,c12,c22,c33\n")
        for name, arrow in arrows.items():
            for s in starts:
                rec = db.records[int(s)]
                cells = traverse(rec.latent, arrow, a["steps"], a["step_size"], model)
                for k, cell in enumerate(cells):
                    step = k - a["steps"]
                    if cell.cells.sum() == 0:
                        continue  # decoded to an empty cell; nothing to measure
                    comp = homogenize(cell, db.material)
                    vals = ",".join(repr(float(v)) for v in comp.as_array())
                    fh.write(f"{name},{rec.id},{step},{vals}\n")
    first = db.records[int(starts[0])]
    strip = traverse(first.latent, arrows["c11"], a["steps"], a["step_size"], model)
    render.cell_strip_svg(
        run_dir / "c11_traversal.svg",
        [c.cells for c in strip],
        labels=[str(k - a["steps"]) for k in range(len(strip))],
    )
    print(f"analyzed {len(db)} records; arrows: {', '.join(arrows)}")


def cmd_family(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render
    from .family import (
        build_family_graph,
        densify_family,
        extract_families,
        select_near_curve,
        stiffness_matching_curve,
    )
    from .pipeline import annotate_latents

    db = _load_database(cfg, manifest)
    model = _load_model(cfg, manifest)
    annotate_latents(db, model)
    f = cfg.section("family")
    curve = stiffness_matching_curve(db.material, delta=f["delta"])
    selected = select_near_curve(db, curve)
    graph = build_family_graph(selected, k=f["k"], n_links=f["n_links"])
    families = extract_families(graph, count=f["count"])
    densified = [
        densify_family(fam, f["samples_per_edge"], model, db.material) for fam in families
    ]
    with open(run_dir / "families.csv", "w") as fh:
        fh.write("family,stage,position,c11,c12,c22,c33\n")
        for i, (fam, dense) in enumerate(zip(families, densified)):
            for stage, seq in (("extracted", fam), ("densified", dense)):
                for pos, (_, comp, _) in enumerate(seq.members):
                    vals = ",".join(repr(float(v)) for v in comp.as_array())
                    fh.write(f"{i},{stage},{pos},{vals}\n")
    for i, dense in enumerate(densified):
        render.cell_strip_svg(
            run_dir / f"family-{i}.svg",
            [m.cells for m, _, _ in dense.members],
        )
    sizes = ", ".join(str(len(d)) for d in densified)
    print(f"extracted {len(families)} families (densified sizes: {sizes})")


def cmd_design_macro(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render
    from .family import stiffness_matching_curve
    from .macroopt import OptimConfig, build_sdf, optimize_properties

    db = _load_database(cfg, manifest)
    problem, meta = _load_problem(cfg, manifest)
    d = cfg.section("design")
    mode = meta.get("mode") or d["mode"]
    ocfg = OptimConfig(
        beta=d["beta"],
        max_iters=d["max_iters"],
        move_tol=d["move_tol"],
        mode=mode,
        beta_continuation=d["beta_continuation"],
    )
    if mode == "database":
        region = build_sdf(db.property_matrix(), resolution=d["resolution"], r_occ=d["r_occ"])
    elif mode == "family":
        region = stiffness_matching_curve(db.material, delta=cfg.section("family")["delta"])
    else:
        raise ValidationError(f"unknown design mode {mode!r}")
    field, history = optimize_properties(problem, region, ocfg)
    field.save_csv(run_dir / "field.csv")
    history.save_csv(run_dir / "history.csv")
    names = ("c11", "c12", "c22", "c33")
    for k, name in enumerate(names):
        grid = field.values[:, k].reshape(problem.n_rows, problem.n_cols)
        render.field_heatmap_svg(run_dir / f"field_{name}.svg", grid, title=name)
    render.curve_svg(
        run_dir / "convergence.svg",
        np.arange(len(history)),
        {"objective": np.array(history.objective)},
        xlabel="iteration",
        ylabel="objective",
        logy=True,
    )
    print(
        f"optimized {problem.n_elems} elements in {len(history)} iterations; "
        f"final rrmse {history.rrmse[-1]:.4f}"
    )


def cmd_assemble(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render
    from .assembly import build_assembly_graph, dd_mrf_solve, save_labeling, stitch_and_evaluate
    from .macroopt import load_field_csv
    from .pipeline import annotate_latents

    db = _load_database(cfg, manifest)
    model = _load_model(cfg, manifest)
    annotate_latents(db, model)
    problem, _ = _load_problem(cfg, manifest)
    field_path = cfg.path("field")
    manifest.add_input("field", field_path)
    field = load_field_csv(field_path, _db_bounds(db))
    a = cfg.section("assembly")
    graph = build_assembly_graph(
        field,
        db,
        problem.n_rows,
        problem.n_cols,
        n_candidates=a["n_candidates"],
        geo_weight=a["geo_weight"],
        mech_weight=a["mech_weight"],
        clustering_seed=cfg.rng_seed,
    )
    labeling = dd_mrf_solve(graph, max_iters=a["max_iters"])
    save_labeling(labeling, graph, run_dir / "labeling.csv")
    bitmap, rrmse, mean_geo, mean_mech = stitch_and_evaluate(labeling, graph, problem, db)
    render.save_pbm(run_dir / "assembled.pbm", bitmap)
    render.bitmap_svg(run_dir / "assembled.svg", bitmap)
    _write_metric_csv(
        run_dir / "assembly.csv",
        [
            ("energy", labeling.energy),
            ("lower_bound", labeling.lower_bound),
            ("gap", labeling.gap()),
            ("iterations", float(labeling.iterations)),
            ("converged", float(labeling.converged)),
            ("assembled_rrmse", rrmse),
            ("mean_geometric_incompat", mean_geo),
            ("mean_mechanical_incompat", mean_mech),
        ],
    )
    print(
        f"assembled {problem.n_rows}x{problem.n_cols} cells; energy {labeling.energy:.4f} "
        f"gap {labeling.gap():.2e} rrmse {rrmse:.4f}"
    )


def cmd_evaluate(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render
    from .assembly import evaluate_selection, load_labeling
    from .macroopt import assemble_and_solve, load_field_csv, objective_and_rrmse

    db = _load_database(cfg, manifest)
    problem, _ = _load_problem(cfg, manifest)
    labeling_path = cfg.path("labeling")
    manifest.add_input("labeling", labeling_path)
    chosen = load_labeling(labeling_path)
    bitmap, rrmse, mean_geo, mean_mech = evaluate_selection(chosen, problem, db)
    rows = [
        ("assembled_rrmse", rrmse),
        ("mean_geometric_incompat", mean_geo),
        ("mean_mechanical_incompat", mean_mech),
    ]
    field_path = cfg.path("field", required=False)
    if field_path is not None:
        manifest.add_input("field", field_path)
        field = load_field_csv(field_path, _db_bounds(db))
        u = assemble_and_solve(problem, field)
        _, rrmse_ref = objective_and_rrmse(u, problem)
        rows.append(("continuous_rrmse", rrmse_ref))
        rows.append(("relative_gap", abs(rrmse - rrmse_ref) / max(rrmse_ref, 1e-12)))
    _write_metric_csv(run_dir / "evaluation.csv", rows)
    render.save_pbm(run_dir / "assembled.pbm", bitmap)
    print(f"evaluated selection; assembled rrmse {rrmse:.4f}")


def cmd_render(cfg: RunConfig, run_dir: Path, manifest: Manifest) -> None:
    from . import render

    db = _load_database(cfg, manifest)
    props = db.property_matrix()
    render.property_scatter_svg(run_dir / "properties.svg", props)
    rng = np.random.default_rng(cfg.rng_seed)
    pick = rng.choice(len(db.records), size=min(12, len(db.records)), replace=False)
    cells = [db.records[int(i)].micro.cells for i in pick]
    labels = [str(db.records[int(i)].id) for i in pick]
    render.cell_strip_svg(run_dir / "gallery.svg", cells, labels=labels)
    print(f"rendered {len(cells)} cells from {len(db)} records")


_COMMANDS = {
    "gen-db": cmd_gen_db,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "family": cmd_family,
    "design-macro": cmd_design_macro,
    "assemble": cmd_assemble,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metacell",
        description="data-driven cell design pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--out", default=".", help="directory that receives run-<timestamp>/")
        p.add_argument("--seed", type=int, default=None, help="override the configured rng seed")
        p.add_argument("--threads", type=int, default=None, help="override the configured thread count")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.override_seed(args.seed)
        if args.threads is not None:
            cfg.sections["run"]["threads"] = int(args.threads)
        run_dir = make_run_dir(args.out)
        manifest = Manifest(args.command, cfg, args.config)
        _COMMANDS[args.command](cfg, run_dir, manifest)
        manifest.write(run_dir)
        print(f"run directory: {run_dir}")
        return 0
    except MetacellError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI reports, it does not crash
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
