"""Command-line entry point: ``artinv <subcommand> [--config F] [--set k=v] [--out D] [--seed N]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_mod
from .corpus import (generate_synthetic_corpus, load_corpus, shifted_spec, two_corpus_synthesis)
from .ema import TARGET_CHANNELS
from .errors import ArtinvError, ConfigError, DataError, NumericalError
from .frontend import read_feature_csv, write_feature_csv
from .metrics import score_trajectories
from .model import load_model, save_model
from .training import make_split, predict_items, prepare_data, train, utterance_features

log = logging.getLogger("artinv")

SUBCOMMANDS = ("synth", "features", "train", "eval", "predict", "export-plot")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
FAILED_MARKER = "FAILED"


def _manifests(cfg: dict) -> list[Path]:
    paths = [Path(p) for p in cfg["data"]["manifests"]]
    if not paths:
        raise ConfigError("data.manifests is empty")
    return paths


def _corpora(cfg: dict):
    return [load_corpus(p) for p in _manifests(cfg)]


def _model_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["paths"]["model"]) if cfg["paths"]["model"] else out / "model.aaim"


def _split_ids(split, which: str) -> list:
    if which not in ("train", "validation", "test"):
        raise ConfigError(f"split must be train, validation or test, not {which!r}")
    return getattr(split, which)


def _prepared_for_model(cfg: dict, out: Path):
    model = load_model(_model_path(cfg, out))
    exp = config_mod.experiment_config(cfg)
    corpora = _corpora(cfg)
    split = make_split(corpora, exp)
    data = prepare_data(corpora, split, exp, model.acoustic_stats, model.target_stats)
    return model, data


def cmd_synth(cfg: dict, out: Path) -> None:
    spec = config_mod.synthetic_spec(cfg)
    shift = cfg["synth"].get("domain_shift")
    if shift:
        spec_b = shifted_spec(spec, **shift)
        for p in two_corpus_synthesis(spec, spec_b, out):
            print(p)
    else:
        print(generate_synthetic_corpus(spec, out / spec.name))


def cmd_features(cfg: dict, out: Path) -> None:
    exp = config_mod.experiment_config(cfg)
    dest = out / "features"
    dest.mkdir(parents=True, exist_ok=True)
    n = 0
    for corpus in _corpora(cfg):
        for uid in sorted(corpus.utterances):
            acoustic, arts = utterance_features(corpus.utterances[uid], exp.la_variant, exp.model)
            write_feature_csv(dest / f"{uid}.acoustic.csv", uid, acoustic, exp.model.frame_rate)
            write_feature_csv(dest / f"{uid}.articulatory.csv", uid, arts, exp.model.frame_rate)
            n += 1
    print(f"wrote features for {n} utterances to {dest}")


def cmd_train(cfg: dict, out: Path) -> None:
    exp = config_mod.experiment_config(cfg)
    corpora = _corpora(cfg)
    split = make_split(corpora, exp)
    data = prepare_data(corpora, split, exp)
    model, report = train(exp, data)
    save_model(model, _model_path(cfg, out))
    (out / "train_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "split.json").write_text(json.dumps(data.split.to_dict(), indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_time_s": report.wall_time}) + "\n")
    print(f"trained: stop epoch {report.stop_epoch}, best epoch {report.best_epoch}")


def cmd_eval(cfg: dict, out: Path) -> None:
    from .metrics import evaluate

    model, data = _prepared_for_model(cfg, out)
    exp = config_mod.experiment_config(cfg)
    ids = _split_ids(data.split, cfg["eval"]["split"])
    report = evaluate(model, data.items(ids), data.target_stats, cfg["eval"]["aggregation"],
                      meta={"mode": exp.mode, "split": cfg["eval"]["split"], "n_utterances": len(ids)})
    (out / "eval_report.csv").write_text(report.to_csv())
    (out / "eval_report.json").write_text(report.to_json())
    print(f"mean PCC {report.mean_pcc:.4f}  mean RMSE {report.mean_rmse:.4f}")


def cmd_predict(cfg: dict, out: Path) -> None:
    model, data = _prepared_for_model(cfg, out)
    ids = _split_ids(data.split, cfg["predict"]["split"])
    items = data.items(ids)
    preds = predict_items(model, items)
    dest = out / "predictions"
    dest.mkdir(parents=True, exist_ok=True)
    stats = data.target_stats
    rate = model.config.frame_rate
    for uid, _, target in items:
        raw, smoothed = preds[uid]
        write_feature_csv(dest / f"{uid}.target.csv", uid, stats.invert(target), rate)
        write_feature_csv(dest / f"{uid}.raw.csv", uid, stats.invert(raw), rate)
        write_feature_csv(dest / f"{uid}.smoothed.csv", uid, stats.invert(smoothed), rate)
    print(f"wrote predictions for {len(items)} utterances to {dest}")


def load_predictions(pred_dir: Path) -> dict:
    """{utterance id: (target, raw, smoothed)} from a predictions directory."""
    out = {}
    for p in sorted(Path(pred_dir).glob("*.target.csv")):
        uid = p.name[: -len(".target.csv")]
        mats = [read_feature_csv(pred_dir / f"{uid}.{kind}.csv")[2] for kind in ("target", "raw", "smoothed")]
        out[uid] = tuple(mats)
    return out


def score_prediction_dir(pred_dir: Path, aggregation: str = "utterance"):
    preds = load_predictions(pred_dir)
    return score_trajectories({u: (t, s) for u, (t, _, s) in preds.items()}, TARGET_CHANNELS, aggregation)


def cmd_export_plot(cfg: dict, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    preds = load_predictions(out / "predictions")
    if not preds:
        raise DataError(f"no predictions under {out / 'predictions'}; run predict first")
    uid = cfg["plot"]["utterance"] or sorted(preds)[0]
    if uid not in preds:
        raise DataError(f"no predictions for utterance {uid}")
    target, raw, smoothed = preds[uid]
    dest = out / "plots" / uid
    dest.mkdir(parents=True, exist_ok=True)
    t = np.arange(target.shape[0]) / 100.0
    plt.rcParams["svg.hashsalt"] = "artinv"
    meta = {"Date": None}

    def draw(ax, j):
        ax.plot(t, target[:, j], color="tab:blue", label="target")
        ax.plot(t, raw[:, j], color="tab:green", lw=0.8, label="predicted (raw)")
        ax.plot(t, smoothed[:, j], color="tab:red", label="predicted (smoothed)")
        ax.set_title(TARGET_CHANNELS[j], fontsize=8)

    for j, name in enumerate(TARGET_CHANNELS):
        fig, ax = plt.subplots(figsize=(6, 2.5))
        draw(ax, j)
        ax.set_xlabel("time (s)")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(dest / f"{name}.svg", metadata=meta)
        plt.close(fig)
    fig, axes = plt.subplots(4, 4, figsize=(14, 10), sharex=True)
    for j, ax in enumerate(axes.ravel()):
        draw(ax, j)
    axes[0, 0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(dest / "combined.svg", metadata=meta)
    plt.close(fig)
    header = ",".join(f"{c}_{k}" for c in TARGET_CHANNELS for k in ("target", "raw", "smoothed"))
    stacked = np.stack([target, raw, smoothed], axis=2).reshape(target.shape[0], -1)
    np.savetxt(dest / "trajectories.csv", stacked, delimiter=",", header=header, comments="", fmt="%.9g")
    print(f"wrote {len(TARGET_CHANNELS) + 1} plots to {dest}")


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "export-plot": cmd_export_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artinv", description="Acoustic-to-articulatory inversion toolkit")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, repeatable")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, help="seed for experiment and synthesis")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out: Path = args.out
    try:
        cfg = config_mod.resolve(args.config, args.overrides, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED_MARKER).unlink(missing_ok=True)
        inputs = [Path(p) for p in cfg["data"]["manifests"]]
        (out / f"resolved_config.{args.command}.json").write_text(config_mod.snapshot(cfg, inputs))
        COMMANDS[args.command](cfg, out)
    except (ArtinvError, OSError) as exc:
        code = _exit_code(exc) if isinstance(exc, ArtinvError) else EXIT_DATA
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        if out.is_dir():
            (out / FAILED_MARKER).write_text(json.dumps(err) + "\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
