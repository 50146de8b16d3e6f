"""Command-line surface: train / analyze / sweep / distill / attack / report.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence.
"""

import argparse
import os
import sys

import numpy as np

from tcx import data, ebm, estimators, experiments, nn, plots, reporting
from tcx.gating import (DETERMINISTIC_PASS, STOCHASTIC_PASS, capture_record,
                        save_gate_dump)
from tcx.manifest import ManifestError, load_manifest
from tcx.serialization import CorruptFileError, save_checkpoint, load_checkpoint

CONFIG_ERRORS = (ManifestError, nn.SpecError, data.DataError,
                 plots.PlotError, CorruptFileError, FileNotFoundError,
                 ValueError)


def _ensure_out(man):
    out = man.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _artifact_index(out, entries):
    path = os.path.join(out, "artifacts.txt")
    with open(path, "w") as fh:
        for kind, name, manifest_hash in entries:
            fh.write(f"kind={kind}\tpath={name}\tmanifest={manifest_hash}\n")


def build_datasets(man):
    d = man["data"]
    if d["kind"] == "synthetic":
        total = d["n"] + d["n_test"]
        ds = data.make_synthetic_classification(
            seed=man.seed + d["seed_offset"], n=total, d=d["dim"],
            n_classes=d["classes"], separation=d["separation"])
        train = ds.select(np.arange(d["n"]))
        test = ds.select(np.arange(d["n"], total))
        test.split = "test"
        return train, test
    if d["kind"] == "idx":
        train = data.load_idx(d["images"], d["labels"], split="train")
        test = data.load_idx(d["test_images"], d["test_labels"], split="test")
        if d["limit"]:
            train = train.select(np.arange(min(d["limit"], train.n)))
            test = test.select(np.arange(min(d["limit"], test.n)))
        return train, test
    raise ManifestError(f"unknown data kind {d['kind']!r}")


def build_schedule(man, lam=None):
    t, e = man["train"], man["ebm"]
    opt = nn.OptConfig(kind=t["optimizer"], lr=t["lr"],
                       momentum=t["momentum"])
    return ebm.TrainSchedule(
        lam=e["lambda"] if lam is None else lam,
        epochs=t["epochs"], batch_size=t["batch_size"],
        task_loss=t["task_loss"], opt=opt, swish_beta=e["swish_beta"],
        penalized_last_k=e["last_k"], ebm_widths=tuple(e["widths"]),
        ebm_lr=e["ebm_lr"], ebm_steps_per_batch=e["steps_per_batch"],
        langevin=ebm.LangevinConfig(step_size=e["langevin_step_size"],
                                    steps=e["langevin_steps"],
                                    noise_seed=man.seed),
        shuffle_seed=man.seed)


def build_kernel_config(man):
    e = man["estimate"]
    return estimators.KernelConfig(kappa_fc=e["kappa_fc"],
                                   kappa_conv_like=e["kappa_conv"])


def _estimator_kinds(man):
    kind = man["estimate"]["estimator"]
    return ("kde", "exact") if kind == "both" else (kind,)


def cmd_train(man):
    out = _ensure_out(man)
    train_ds, test_ds = build_datasets(man)
    spec = man.model_spec()
    net = nn.init_network(spec, man.seed)
    schedule = build_schedule(man)
    config = build_kernel_config(man)
    kind = _estimator_kinds(man)[0]
    run_id = f"train_{man.hash}"
    net, log = experiments.train_with_tracking(
        net, train_ds, test_ds, schedule,
        analysis_every=man["train"]["track_every"],
        analysis_seed=man["train"]["analysis_seed"],
        analysis_k=man["train"]["analysis_k"],
        config=config, estimator_kind=kind, run_id=run_id)

    ckpt = os.path.join(out, "model.tckp")
    save_checkpoint(ckpt, net)
    reporting.write_csv(os.path.join(out, "train_log.csv"),
                        reporting.TRAINLOG_COLUMNS, reporting.runlog_rows(log),
                        manifest_hash=man.hash)
    artifacts = [("network_checkpoint", "model.tckp", man.hash),
                 ("train_log", "train_log.csv", man.hash)]
    for li, enet in log.extras.get("ebms", {}).items():
        name = f"ebm_layer{li}.tckp"
        save_checkpoint(os.path.join(out, name), enet.net)
        artifacts.append(("ebm_checkpoint", name, man.hash))
    _artifact_index(out, artifacts)
    print(f"trained {schedule.epochs} epochs; artifacts in {out}")
    return 0


def cmd_analyze(man, checkpoint=None):
    out = _ensure_out(man)
    train_ds, _ = build_datasets(man)
    ckpt = checkpoint or os.path.join(out, "model.tckp")
    net = load_checkpoint(ckpt, seed=man.seed)
    analysis, _ = data.subsample_analysis_set(
        train_ds, k=man["train"]["analysis_k"],
        seed=man["train"]["analysis_seed"])
    config = build_kernel_config(man)
    run_id = f"analyze_{man.hash}"
    rows = []
    for kind in _estimator_kinds(man):
        report = experiments.analyze_network(
            net, analysis.features, labels=analysis.labels, config=config,
            estimator_kind=kind, dropout_seed=man["train"]["analysis_seed"])
        rows.extend(reporting.report_rows(report, run_id, epoch=0))
    reporting.write_csv(os.path.join(out, "report.csv"),
                        reporting.METRIC_COLUMNS, rows, manifest_hash=man.hash)
    stoch = capture_record(net, analysis.features, STOCHASTIC_PASS,
                           seed=man["train"]["analysis_seed"])
    det = capture_record(net, analysis.features, DETERMINISTIC_PASS)
    save_gate_dump(os.path.join(out, "gates_stochastic.tcgd"), stoch)
    save_gate_dump(os.path.join(out, "gates_deterministic.tcgd"), det)
    _artifact_index(out, [
        ("complexity_report", "report.csv", man.hash),
        ("gate_dump", "gates_stochastic.tcgd", man.hash),
        ("gate_dump", "gates_deterministic.tcgd", man.hash)])
    print(f"report written to {os.path.join(out, 'report.csv')}")
    return 0


def cmd_sweep(man, jobs=None):
    out = _ensure_out(man)
    train_ds, test_ds = build_datasets(man)
    spec = man.model_spec()
    schedule = build_schedule(man)
    config = build_kernel_config(man)
    s = man["sweep"]
    baselines = {}
    if s["l1"]:
        baselines["l1"] = s["l1"]
    if s["l2"]:
        baselines["l2"] = s["l2"]
    result, logs = experiments.lambda_sweep(
        spec, train_ds, test_ds, s["lambdas"], s["seeds"], schedule,
        baselines=baselines, config=config,
        jobs=jobs or man["run"]["jobs"])
    reporting.write_csv(os.path.join(out, "sweep.csv"),
                        reporting.SweepResult.COLUMNS, result.rows,
                        manifest_hash=man.hash)
    log_rows = []
    for run_id in sorted(logs):
        log_rows.extend(reporting.runlog_rows(logs[run_id]))
    reporting.write_csv(os.path.join(out, "sweep_logs.csv"),
                        reporting.TRAINLOG_COLUMNS, log_rows,
                        manifest_hash=man.hash)
    svg = plots.emit_svg(_stringify(result.rows), "lambda-curves")
    _write_svg(os.path.join(out, "sweep_H.svg"), svg, man.hash)
    _artifact_index(out, [("sweep_result", "sweep.csv", man.hash),
                          ("sweep_logs", "sweep_logs.csv", man.hash),
                          ("figure", "sweep_H.svg", man.hash)])
    rho = experiments.sweep_spearman(result)
    print(f"sweep done; spearman(lambda, H) = {rho:.3f}; artifacts in {out}")
    return 0


def SweepColumns():
    from tcx.reporting import SweepResult
    return SweepResult.COLUMNS


def _stringify(rows):
    return [{k: ("" if v is None else str(v)) for k, v in r.items()}
            for r in rows]


def _write_svg(path, svg_text, manifest_hash):
    svg_text = svg_text.replace(
        "<svg ", f"<!-- manifest={manifest_hash} -->\n<svg ", 1)
    with open(path, "w") as fh:
        fh.write(svg_text)


def cmd_distill(man):
    out = _ensure_out(man)
    cfg = man["distill"]
    rng_inputs = data.make_synthetic_regression_images(
        seed=man.seed + 17, n=cfg["n"], hw=cfg["hw"])
    gray = data.to_grayscale(rng_inputs)
    builders = {}
    for depth in cfg["target_depths"]:
        w = cfg["target_width"]

        def stacked_builder(d_in, d_out, depth=depth, w=w):
            widths = [d_in] + [w] * depth + [d_out]
            return nn.stacked_mlp_spec(widths)

        def residual_builder(d_in, d_out, depth=depth, w=w):
            widths = [d_in] + [w] * depth + [d_out]
            return nn.residual_mlp_spec(widths)

        builders[f"stacked{depth}"] = stacked_builder
        builders[f"residual{depth}"] = residual_builder
    schedule = build_schedule(man, lam=0.0)
    schedule = ebm.TrainSchedule(
        lam=0.0, epochs=cfg["epochs"], batch_size=man["train"]["batch_size"],
        task_loss="mse", opt=schedule.opt, shuffle_seed=man.seed)
    rows = experiments.distillation_ceiling(
        cfg["task_ns"], builders, cfg["trials"], gray,
        task_width=cfg["task_width"], schedule=schedule, base_seed=man.seed,
        config=build_kernel_config(man))
    columns = ["task_n", "target", "trial", "final_H", "final_mse"]
    reporting.write_csv(os.path.join(out, "distill.csv"), columns, rows,
                        manifest_hash=man.hash)
    svg = plots.render_lines(_stringify(rows), x="task_n", y="final_H",
                             group="target", title="complexity ceiling",
                             x_label="task depth n", y_label="H (nats)")
    _write_svg(os.path.join(out, "distill.svg"), svg, man.hash)
    _artifact_index(out, [("distill_grid", "distill.csv", man.hash),
                          ("figure", "distill.svg", man.hash)])
    print(f"distillation grid written to {out}")
    return 0


def cmd_attack(man):
    out = _ensure_out(man)
    train_ds, test_ds = build_datasets(man)
    spec = man.model_spec()
    schedule = build_schedule(man, lam=0.0)
    a = man["attack"]
    attack = experiments.AttackConfig(step_size=a["step_size"],
                                      max_iters=a["max_iters"],
                                      utility_target=a["utility_target"])
    models = []
    for i in range(a["n_models"]):
        net = nn.init_network(spec, man.seed + i)
        net, _ = ebm.alternating_train(net, train_ds.features, train_ds.labels,
                                       schedule, run_id=f"attack_m{i}")
        models.append(net)
    eval_x = test_ds.features[: a["n_samples"]]
    eval_y = test_ds.labels[: a["n_samples"]]
    rows = []
    for mi, net in enumerate(models):
        for si, (x, y) in enumerate(zip(eval_x, eval_y)):
            _, norm = experiments.pgd_min_perturbation(net, x, y, attack)
            rows.append({"model": mi, "sample": si,
                         "norm": "inf" if np.isinf(norm) else norm,
                         "reached": int(np.isfinite(norm))})
    reporting.write_csv(os.path.join(out, "attack.csv"),
                        ["model", "sample", "norm", "reached"], rows,
                        manifest_hash=man.hash)
    matrix = experiments.transferability_matrix(models, attack, eval_x, eval_y)
    mrows = [{"source": i, "target": j, "rate": matrix[i, j]}
             for i in range(len(models)) for j in range(len(models))]
    reporting.write_csv(os.path.join(out, "transfer.csv"),
                        ["source", "target", "rate"], mrows,
                        manifest_hash=man.hash)
    _artifact_index(out, [("attack_norms", "attack.csv", man.hash),
                          ("transfer_matrix", "transfer.csv", man.hash)])
    print(f"attack results written to {out}")
    return 0


def cmd_report(csv_paths, plot_name, svg_out, estimator="kde",
               allow_mixed=False):
    all_rows = []
    hashes = set()
    for path in csv_paths:
        rows, manifest_hash = reporting.read_csv(path)
        hashes.add(manifest_hash)
        all_rows.extend(rows)
    if len(hashes) > 1 and not allow_mixed:
        raise ManifestError(
            f"inputs carry different manifest hashes {sorted(hashes)}; "
            "pass --allow-mixed to combine them")
    svg = plots.emit_svg(all_rows, plot_name, estimator=estimator)
    _write_svg(svg_out, svg, "+".join(sorted(hashes)))
    print(f"wrote {svg_out}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="tcx",
        description="transformation-complexity experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--jobs", type=int)
        p.add_argument("--estimator", choices=["kde", "exact", "both"])
        p.add_argument("--kappa-fc", type=float)
        p.add_argument("--kappa-conv", type=float)
        p.add_argument("--lambda", dest="lam", type=float)

    for name in ("train", "analyze", "sweep", "distill", "attack"):
        p = sub.add_parser(name)
        add_common(p)
        if name == "analyze":
            p.add_argument("--checkpoint")
    rp = sub.add_parser("report")
    rp.add_argument("--csv", nargs="+", required=True)
    rp.add_argument("--plot", required=True)
    rp.add_argument("--svg-out", required=True)
    rp.add_argument("--estimator", choices=["kde", "exact"], default="kde")
    rp.add_argument("--allow-mixed", action="store_true")
    return parser


def _overrides_from_args(args):
    overrides = {}
    if args.seed is not None:
        overrides[("run", "seed")] = str(args.seed)
    if args.out is not None:
        overrides[("run", "out")] = args.out
    if args.jobs is not None:
        overrides[("run", "jobs")] = str(args.jobs)
    if args.estimator is not None:
        overrides[("estimate", "estimator")] = args.estimator
    if args.kappa_fc is not None:
        overrides[("estimate", "kappa_fc")] = str(args.kappa_fc)
    if args.kappa_conv is not None:
        overrides[("estimate", "kappa_conv")] = str(args.kappa_conv)
    if args.lam is not None:
        overrides[("ebm", "lambda")] = str(args.lam)
    return overrides


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.csv, args.plot, args.svg_out,
                              estimator=args.estimator,
                              allow_mixed=args.allow_mixed)
        man = load_manifest(args.manifest, _overrides_from_args(args))
        if args.command == "train":
            return cmd_train(man)
        if args.command == "analyze":
            return cmd_analyze(man, checkpoint=args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(man, jobs=args.jobs)
        if args.command == "distill":
            return cmd_distill(man)
        if args.command == "attack":
            return cmd_attack(man)
        raise ManifestError(f"unknown command {args.command!r}")
    except ebm.LangevinDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
