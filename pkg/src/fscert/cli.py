"""fscert command line: gen-data, train, certify, attack, verify.

Every command reads one JSON config (defaults when omitted), applies flag
overrides, writes the resolved config as ``<command>.config.json`` in the
output directory, and exits 0 on success, 1 on a failed check and 2 on
a usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attacks, certification as cert, config as config_mod, gauss_core as gc, gsb, io, oracle
from .encoders import Encoder, gen_mixture_dataset, make_encoder, train_encoder_supervised
from .smoothing import SmoothingConfig

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DATASET_FILE = "dataset.jsonl"
MODEL_FILE = "model.fsc"


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args, command: str) -> dict:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "sigma", None) is not None:
        cfg["smoothing"]["sigma"] = args.sigma
        if command == "train":
            cfg["gsb"]["sigma"] = args.sigma
    if getattr(args, "mode", None) is not None:
        cfg["smoothing"]["mode"] = args.mode
    if getattr(args, "n_samples", None) is not None:
        cfg["smoothing"]["n_samples"] = args.n_samples
    if getattr(args, "eps_list", None) is not None:
        try:
            cfg["certify"]["eps_list"] = [float(v) for v in args.eps_list.split(",") if v.strip()]
        except ValueError:
            raise config_mod.ConfigError(f"--eps-list: cannot parse {args.eps_list!r}") from None
    if getattr(args, "compare_rs", False):
        cfg["certify"]["compare_rs"] = True
    if getattr(args, "grid", None) is not None:
        cfg["verify"]["grid"] = args.grid
    cfg = config_mod.validate(cfg)
    (_out_dir(args) / f"{command}.config.json").write_text(config_mod.dump(cfg))
    return cfg


def _load_data(args, cfg):
    path = Path(args.data) if getattr(args, "data", None) else Path(args.out) / DATASET_FILE
    if not path.exists():
        raise UsageError(f"dataset {path} not found (run gen-data first)")
    data = io.load_dataset(path)
    return data.split(cfg["data"]["holdout"], cfg["seed"])


def _load_model(args):
    path = Path(args.model) if getattr(args, "model", None) else Path(args.out) / MODEL_FILE
    if not path.exists():
        raise UsageError(f"model checkpoint {path} not found (run train --stage encoder first)")
    return io.load_model(path)


def _gsb_config(cfg: dict) -> gsb.GsbConfig:
    g = cfg["gsb"]
    fields = {k: v for k, v in g.items() if k in gsb.GsbConfig.__dataclass_fields__}
    return gsb.GsbConfig(**fields, seed=cfg["seed"])


def _variants(e: Encoder, P, M, sigma: float) -> list[tuple[str, object]]:
    out = [("vanilla", e)]
    if P is not None or M is not None:
        out.append(("gsb", gsb.GsbEncoder(e, P, M, sigma)))
    return out


def _smoothing(cfg: dict) -> SmoothingConfig:
    s = cfg["smoothing"]
    return SmoothingConfig(sigma=s["sigma"], n_samples=s["n_samples"], base_seed=cfg["seed"],
                           alpha=s["alpha"], mode=s["mode"])


# -- commands -----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve(args, "gen-data")
    d = cfg["data"]
    try:
        data = gen_mixture_dataset(d["K"], d["per_class"], d["d_in"], d["separation"], cfg["seed"],
                                   spread=d["spread"], latent_dim=d["latent_dim"])
    except ValueError as exc:
        raise config_mod.ConfigError(f"data: {exc}") from None
    io.save_dataset(data, _out_dir(args) / DATASET_FILE)
    print(f"wrote {len(data)} samples, {data.class_count} classes")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args, "train")
    out = _out_dir(args)
    train, held = _load_data(args, cfg)
    history = []
    stage = args.stage
    if stage in ("encoder", "both"):
        c = cfg["encoder"]
        e = make_encoder(c["kind"], train.d_in, c["d_f"], cfg["seed"], hidden_dims=c["hidden_dims"],
                         gain=c["gain"])
        if c["epochs"] > 0:
            e = train_encoder_supervised(e, train, c["epochs"], c["lr"], c["temperature"], c["batch_size"],
                                         cfg["seed"])
            for i, loss in enumerate(e.meta["loss_history"]):
                history.append({"epoch": i, "stage": "encoder", "encoder_loss": loss})
        io.save_model(out / MODEL_FILE, e)
        print(f"encoder {e.kind} d_in={e.d_in} d_f={e.d_f} saved")
    if stage in ("gsb", "both"):
        e, _, _, _ = _load_model(args)
        gcfg = _gsb_config(cfg)
        heldout = held.inputs[:cfg["gsb"]["heldout_inputs"]] if len(held) else None
        P, M, rows = gsb.train_gsb(e, train, gcfg, heldout=heldout)
        history.extend(rows)
        io.save_model(out / MODEL_FILE, e, P, M, {"sigma": gcfg.sigma})
        last = rows[-1]["heldout_score"] if rows else float("nan")
        print(f"booster trained, final held-out score {last:.4f}")
    io.write_csv(out / "history.csv", ("epoch", "stage", "encoder_loss") + gsb.HISTORY_COLUMNS[2:], history)
    return EXIT_OK


TABLE2_FS = "fs_certified_accuracy"
TABLE2_RS = "rs_certified_accuracy"


def cmd_certify(args) -> int:
    cfg = _resolve(args, "certify")
    out = _out_dir(args)
    train, held = _load_data(args, cfg)
    e, P, M, meta = _load_model(args)
    c = cfg["certify"]
    scfg = _smoothing(cfg)
    eps_list = c["eps_list"]
    inputs = held.inputs[:c["inputs"]]
    labels = held.labels[:c["inputs"]]
    records, agg_rows, t1_rows, t2_rows = [], [], [], []
    head = cert.fit_prototypes(e, train)
    variants = _variants(e, P, M, meta.get("sigma", cfg["gsb"]["sigma"]))
    for name, fmap in variants:
        feats = [cert.certify_feature(fmap, x, scfg, eps_list, i) for i, x in enumerate(inputs)]
        clean = e.encode_batch(inputs)
        for fc in feats:
            rec = {"variant": name, **fc.to_record()}
            if c["level"] in ("prediction", "both"):
                pc = cert.certify_prediction(head, clean[fc.input_id], fc, eps_list[-1])
                rec.update({"clean_class": pc.clean_class, "tie": pc.tie,
                            "max_certified_eps": pc.max_certified_eps})
            records.append(rec)
        for row in cert.aggregate_feature_certificates(feats, c["target_cos"]):
            agg_rows.append({"variant": name, **row})
        if c["level"] in ("feature", "both"):
            row = {"variant": name, "avg_radius": float(np.mean([f.radius_at_half for f in feats]))}
            for j, eps in enumerate(eps_list):
                row[f"fcsb@{eps:g}"] = float(np.mean([f.fcsb_curve[j][1] for f in feats]))
            t1_rows.append(row)
        if c["level"] in ("prediction", "both"):
            correct = cert.predict_batch(head, clean) == labels
            fs = np.array([cert.certified_at_grid(f, head, clean[f.input_id], eps_list) for f in feats])
            fs_curve = cert.certified_accuracy_curve(fs, correct)
            rs_curve = None
            if c["compare_rs"]:
                rs = [cert.rs_baseline_certify(fmap, head, x, scfg.sigma, c["rs_n_select"], c["rs_n_estimate"],
                                               scfg.alpha, cfg["seed"], i) for i, x in enumerate(inputs)]
                rs_ok = np.array([cert.rs_certified_at_grid(r, eps_list) for r in rs])
                rs_correct = np.array([r.label == y for r, y in zip(rs, labels)])
                rs_curve = cert.certified_accuracy_curve(rs_ok, rs_correct)
            for j, eps in enumerate(eps_list):
                row = {"variant": name, "eps": eps, TABLE2_FS: fs_curve[j]}
                if rs_curve is not None:
                    row[TABLE2_RS] = rs_curve[j]
                t2_rows.append(row)
    io.write_jsonl(out / "certificates.jsonl", records)
    io.write_csv(out / "aggregate.csv", ("variant",) + cert.AGGREGATE_COLUMNS, agg_rows)
    if t1_rows:
        io.write_csv(out / "table1.csv", ["variant"] + [f"fcsb@{e:g}" for e in eps_list] + ["avg_radius"], t1_rows)
    if t2_rows:
        cols = ["variant", "eps", TABLE2_FS] + ([TABLE2_RS] if c["compare_rs"] else [])
        io.write_csv(out / "table2.csv", cols, t2_rows)
    print(f"certified {len(inputs)} inputs for {len(variants)} variant(s)")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _resolve(args, "attack")
    out = _out_dir(args)
    train, held = _load_data(args, cfg)
    e, P, M, meta = _load_model(args)
    a = cfg["attack"]
    scfg = _smoothing(cfg)
    failed = False
    lines = []
    fcs_rows = []
    head = cert.fit_prototypes(e, train)
    for name, fmap in _variants(e, P, M, meta.get("sigma", cfg["gsb"]["sigma"])):
        if a["preset"] in ("soundness", "all"):
            inputs = held.inputs[:a["inputs"]]
            clean = e.encode_batch(inputs)
            feats = [cert.certify_feature(fmap, x, scfg, [0.0], i) for i, x in enumerate(inputs)]
            preds = []
            for fc in feats:
                u = clean[fc.input_id]
                m = cert.max_certified_eps(fc.score_used, fc.sigma, head.scores(u), cert.predict(head, u).label)
                preds.append(cert.certify_prediction(head, u, fc, m))
            acfg = attacks.AttackConfig(norm=a["norm"], steps=a["steps"], eot_samples=a["eot_samples"],
                                        sigma=scfg.sigma, seed=cfg["seed"])
            report = attacks.validate_certificates(fmap, inputs, feats, acfg, rho=a["rho"],
                                                   n_measure=a["measure_factor"] * scfg.n_samples,
                                                   measure_seed=a["measure_seed"], head=head,
                                                   prediction_certs=preds)
            lines.extend(f"variant={name} {line}" for line in report.lines())
            failed |= report.violations > 0
        if a["preset"] in ("fcs", "all"):
            inputs = held.inputs[:a["fcs_inputs"]]
            for model, eot in (("plain", 0), ("smoothed", a["fcs_eot"])):
                acfg = attacks.AttackConfig(norm=a["norm"], eps=a["fcs_eps"], steps=a["fcs_steps"],
                                            eot_samples=eot, sigma=scfg.sigma, seed=cfg["seed"])
                res = attacks.pgd_attack_batch(fmap, inputs, acfg)
                fcs_rows.append({"variant": name, "attacked_model": model, "eps": a["fcs_eps"],
                                 "mean_fcs": float(np.mean([r.achieved_cos_clean for r in res])),
                                 "min_fcs": float(np.min([r.achieved_cos_clean for r in res]))})
    if lines:
        io.write_lines(out / "violations.txt", lines)
    if fcs_rows:
        io.write_csv(out / "fcs.csv", ("variant", "attacked_model", "eps", "mean_fcs", "min_fcs"), fcs_rows)
    if failed:
        print("certificate violations found", file=sys.stderr)
        return EXIT_FAIL
    print("no certificate violations" if lines else "attack comparison written")
    return EXIT_OK


def _phi_grid_check() -> tuple[float, float]:
    ps = np.linspace(1e-6, 1 - 1e-6, 10_000)
    round_trip = max(abs(gc.std_normal_cdf(gc.std_normal_inv_cdf(float(p))) - p) for p in ps)
    consistency = 0.0
    # radius is floored at 0 below s = 0.75, so the round trip starts there
    for s in np.linspace(0.75, 0.999, 50):
        for sigma in (0.12, 0.25, 0.5, 1.0):
            r = gc.certified_radius(float(s), sigma, 0.5)
            consistency = max(consistency, abs(gc.fcsb(float(s), r, sigma) - 0.5))
    return round_trip, consistency


def cmd_verify(args) -> int:
    cfg = _resolve(args, "verify")
    out = _out_dir(args)
    v = cfg["verify"]
    checks = []
    rt, cons = _phi_grid_check()
    checks.append(("phi_round_trip", rt, 1e-9))
    checks.append(("fcsb_radius_consistency", cons, 1e-8))
    exact = max(abs(gc.fcsb(s, 0.0, 1.0) - (2 * s - 1)) for s in np.linspace(0, 1, 101))
    checks.append(("fcsb_zero_budget", exact, 0.0))
    checks.append(("radius_at_three_quarters", abs(gc.certified_radius(0.75, 1.0, 0.5)), 0.0))
    grid = 41 if v["grid"] == "fine" else 21
    sphere = oracle.sphere_grid_check(grid=grid, samples=v["sphere_samples"], seed=cfg["seed"])
    checks.append((f"sphere_bounds_{grid}x{grid}", sphere.max_deviation, 1e-3))
    checks.append(("sphere_sampled_violations", float(sphere.violations), 0.0))
    model = Path(args.model) if getattr(args, "model", None) else Path(args.out) / MODEL_FILE
    if model.exists():
        e = io.load_model(model)[0]
    else:
        d = cfg["data"]
        e = make_encoder(cfg["encoder"]["kind"], d["d_in"], cfg["encoder"]["d_f"], cfg["seed"],
                         hidden_dims=cfg["encoder"]["hidden_dims"], gain=cfg["encoder"]["gain"])
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0x564552]))
    xs = rng.standard_normal((v["identity_inputs"], e.d_in))
    scfg = SmoothingConfig(sigma=cfg["smoothing"]["sigma"], n_samples=v["identity_samples"],
                           base_seed=cfg["seed"])
    ident = oracle.proof_identity_check(e, xs, scfg)
    checks.append(("identity_inner_product", ident.max_identity_error, 1e-12))
    checks.append(("jensen_norm_violations", float(ident.norm_violations), 0.0))
    checks.append(("renormalization_violations", float(ident.renormalization_violations), 0.0))
    lines, failed = [], False
    for name, dev, tol in checks:
        ok = dev <= tol
        failed |= not ok
        lines.append(f"check={name} max_deviation={io.fmt_number(dev)} tolerance={io.fmt_number(tol)} "
                     f"pass={io.fmt_number(ok)}")
    io.write_lines(out / "verify.txt", lines)
    for line in lines:
        print(line)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_show_config(args) -> int:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    sys.stdout.write(config_mod.dump(config_mod.validate(cfg)))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--out", default="fscert-run", help="output directory")
    parser = argparse.ArgumentParser(prog="fscert", description="feature-space smoothing certification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write a Gaussian-mixture dataset")

    p = sub.add_parser("train", parents=[common], help="build the encoder and/or train the booster")
    p.add_argument("--stage", choices=("encoder", "gsb", "both"), default="both")
    p.add_argument("--sigma", type=float)
    p.add_argument("--data")
    p.add_argument("--model")

    for name, text in (("certify", "feature and prediction certificates"),
                       ("attack", "certificate soundness and attack comparison")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--mode", choices=("point-estimate", "certified"))
        p.add_argument("--sigma", type=float)
        p.add_argument("--n-samples", type=int)
        p.add_argument("--data")
        p.add_argument("--model")
        if name == "certify":
            p.add_argument("--eps-list", help="comma-separated budgets")
            p.add_argument("--compare-rs", action="store_true")

    sub.add_parser("show-config", parents=[common], help="print the fully resolved config")

    p = sub.add_parser("verify", parents=[common], help="closed-form and oracle checks")
    p.add_argument("--grid", choices=("default", "fine"))
    p.add_argument("--sigma", type=float)
    p.add_argument("--model")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "certify": cmd_certify,
            "attack": cmd_attack, "verify": cmd_verify, "show-config": cmd_show_config}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (config_mod.ConfigError, UsageError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
