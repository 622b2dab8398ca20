"""IPGAN pipeline command line; each subcommand runs one stage and writes into --out.

Exit codes: 0 success, 1 runtime failure (an ``INCOMPLETE`` sentinel is left
in the output directory), 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import fcntl
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .config import ConfigError
from .datasets import (
    SyntheticSpec,
    generate_synthetic_dataset,
    ingest_reid_directory,
    load_manifest,
    materialize,
    save_manifest,
)
from .evaluation import (
    camera_assignment_accuracy,
    compute_cmc_map,
    extract_features,
    identity_preservation_accuracy,
    plot_cmc,
    plot_losses,
)
from .losses import LossWeights
from .params import ModelParams
from .training import (
    GanArchitecture,
    TrainConfig,
    pretrain_semantic_discriminator,
    train_camera_classifier,
    train_ipgan,
    train_reid,
    windowed_means,
)
from .translation import MANIFEST_NAME, TranslationJob, translate_dataset

logger = logging.getLogger("ipgan")

SUBCOMMANDS = (
    "synth-data",
    "pretrain-dsem",
    "train-ipgan",
    "translate",
    "train-reid",
    "evaluate",
    "audit-identity",
    "report",
)
OUT_ROOT_ENV = "IPGAN_OUTPUT_ROOT"
SENTINEL = "INCOMPLETE"
SUMMARY = "summary.json"
DATA_SPLITS = ("source_train", "target_train", "query", "gallery")


class RunError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# helpers


def _require(cfg, key):
    section, name = key.split(".")
    value = cfg[section][name]
    if not value:
        raise ConfigError(f"{key} must be set for this subcommand", key)
    return value


def _data(cfg, split):
    root = Path(_require(cfg, "inputs.data"))
    path = root / f"{split}.manifest"
    if not path.is_file():
        raise RunError(f"missing {path}; run synth-data first")
    return load_manifest(path)


def _classifier_config(cfg):
    t = cfg["reid_train"]
    return TrainConfig.for_classifier(
        total_epochs=t["epochs"],
        base_lr=t["lr"],
        batch_size=t["batch_size"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        seed=cfg["run"]["seed"],
        flip=t["flip"],
    )


def _reid_arch(cfg):
    r = cfg["reid"]
    return {
        "stage_channels": r["stage_channels"],
        "blocks_per_stage": r["blocks_per_stage"],
        "block": r["block"],
        "stem": r["stem"],
        "stem_channels": r["stem_channels"],
        "embedding_dim": r["embedding_dim"],
        "feature_source": r["feature_source"],
    }


def _write_summary(out, summary):
    (out / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _read_summary(path):
    p = Path(path)
    p = p if p.name == SUMMARY else p / SUMMARY
    return json.loads(p.read_text()) if p.is_file() else {}


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth_data(cfg, out):
    d = cfg["data"]
    seed = cfg["run"]["seed"]
    if d["source_root"] or d["target_root"]:
        if not (d["source_root"] and d["target_root"]):
            raise ConfigError("data.source_root and data.target_root must be set together", "data.source_root")
        size = (d["height"], d["width"])
        src, _, _ = ingest_reid_directory(d["source_root"], size, name="source")
        tgt, query, gallery = ingest_reid_directory(d["target_root"], size, name="target")
        manifests = []
        for name, m in zip(DATA_SPLITS, (src, tgt, query, gallery)):
            recs = [dataclasses.replace(r, image_ref=str((Path(m.root) / r.image_ref).resolve())) for r in m.records]
            manifests.append(m.replace(records=recs, name=name, seed=seed, root=out))
    else:
        spec = SyntheticSpec(
            num_identities=d["num_identities"],
            num_cameras=d["num_cameras"],
            images_per_identity_per_camera=d["images_per_identity_per_camera"],
            image_height=d["height"],
            image_width=d["width"],
            num_test_identities=d["num_test_identities"] or None,
            num_distractors=d["num_distractors"],
        )
        try:
            corpora = generate_synthetic_dataset(spec, seed)
        except ValueError as exc:
            raise ConfigError(str(exc), "data") from None
        manifests = [materialize(m, out) for m in corpora]
    counts = {}
    for name, m in zip(DATA_SPLITS, manifests):
        save_manifest(m, out / f"{name}.manifest")
        counts[name] = len(m)
    return {"counts": counts, "num_cameras": manifests[1].num_cameras, "num_identities": manifests[0].num_identities}


def cmd_pretrain_dsem(cfg, out):
    src = _data(cfg, "source_train")
    params = pretrain_semantic_discriminator(src, _classifier_config(cfg), _reid_arch(cfg), out / "metrics.jsonl")
    params.save(out / "dsem.params")
    return {
        "train_accuracy": params.extra["train_accuracy"],
        "train_cross_entropy": params.extra["train_cross_entropy"],
        "num_identities": len(params.extra["vocabulary"]),
        "params_sha256": params.digest(),
    }


def _gan_config(cfg):
    t, w, g = cfg["gan_train"], cfg["weights"], cfg["gan"]
    return TrainConfig(
        total_epochs=t["epochs"],
        base_lr=t["lr"],
        batch_size=t["batch_size"],
        seed=cfg["run"]["seed"],
        weights=LossWeights(w["lambda_dom"], w["lambda_rec"], w["lambda_sem"]),
        d_steps_per_g_step=t["d_steps_per_g_step"],
        with_semantic=w["lambda_sem"] > 0,
        non_saturating=g["non_saturating"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        checkpoint_every=t["checkpoint_every"],
        log_every=t["log_every"],
    )


def cmd_train_ipgan(cfg, out):
    src, tgt = _data(cfg, "source_train"), _data(cfg, "target_train")
    config = _gan_config(cfg)
    g = cfg["gan"]
    arch = GanArchitecture(g["base_channels"], g["num_residual_blocks"], g["disc_base_channels"], g["disc_layers"], g["leaky_slope"])
    d_sem, digest_before = None, None
    if config.uses_semantic:
        d_sem = ModelParams.load(_require(cfg, "inputs.dsem"))
        digest_before = d_sem.digest()
    metrics_path = out / "metrics.jsonl"
    resume = cfg["run"]["resume"] or None
    if resume is None and metrics_path.exists():
        metrics_path.unlink()
    ckpt = train_ipgan(src, tgt, d_sem, config, arch, out / "checkpoints", resume, metrics_path)
    ckpt.models["generator"].save(out / "generator.params")
    ckpt.models["domain_discriminator"].save(out / "domain_discriminator.params")
    ckpt.save(out / "final.ckpt")
    rec_first, rec_last = windowed_means([s["rec"] for s in ckpt.metrics["steps"] if "rec" in s])
    summary = {
        "method": ckpt.models["generator"].extra["method"],
        "weights": dataclasses.asdict(config.weights),
        "epochs": config.total_epochs,
        "adversarial_form": "non-saturating" if config.non_saturating else "saturating",
        "rec_first_10pct": rec_first,
        "rec_last_10pct": rec_last,
        "final_epoch": ckpt.metrics["epochs"][-1],
    }
    if d_sem is not None:
        summary["dsem_sha256_before"] = digest_before
        summary["dsem_sha256_after"] = ModelParams.load(cfg["inputs"]["dsem"]).digest()
        summary["dsem_unchanged"] = d_sem.digest() == digest_before == summary["dsem_sha256_after"]
    if cfg["run"]["plots"]:
        plot_losses(ckpt.metrics["epochs"], out / "losses.png")
    return summary


def cmd_translate(cfg, out):
    src = _data(cfg, "source_train")
    gen = ModelParams.load(_require(cfg, "inputs.generator"))
    manifest = translate_dataset(TranslationJob(gen, src, out, seed=cfg["run"]["seed"]))
    return {
        "method": gen.extra.get("method", "unknown"),
        "num_source": len(src),
        "num_translated": len(manifest),
        "target_cameras": sorted(set(manifest.cameras.tolist())),
        "manifest": MANIFEST_NAME,
    }


def _train_source(cfg):
    train = cfg["inputs"]["train"]
    if cfg["reid_train"]["labels"] == "camera" and not train:
        return _data(cfg, "target_train"), "camera-style"
    if train:
        p = Path(train)
        path = p / MANIFEST_NAME if p.is_dir() else p
        manifest = load_manifest(path)
        method = _read_summary(path.parent).get("method", "translated")
        return manifest, method
    return _data(cfg, "source_train"), "direct"


def cmd_train_reid(cfg, out):
    manifest, method = _train_source(cfg)
    use_ibn = cfg["reid"]["use_ibn"]
    if cfg["reid_train"]["labels"] == "camera":
        params = train_camera_classifier(manifest, _classifier_config(cfg), _reid_arch(cfg), out / "metrics.jsonl")
        params.save(out / "camera_classifier.params")
        return {
            "method": method,
            "labels": "camera",
            "num_cameras": len(params.extra["vocabulary"]),
            "train_accuracy": params.extra["train_accuracy"],
        }
    params = train_reid(manifest, _classifier_config(cfg), use_ibn, _reid_arch(cfg), out / "metrics.jsonl")
    params.extra["method"] = method
    params.save(out / "reid.params")
    n = len(params.extra["vocabulary"])
    return {
        "method": method,
        "arch": "ibn" if use_ibn else "baseline",
        "num_identities": n,
        "train_cross_entropy": params.extra["train_cross_entropy"],
        "cross_entropy_target": float(np.log(n) / 10),
        "train_accuracy": params.extra["train_accuracy"],
    }


def cmd_evaluate(cfg, out):
    model = ModelParams.load(_require(cfg, "inputs.model"))
    query, gallery = _data(cfg, "query"), _data(cfg, "gallery")
    p = cfg["protocol"]
    res = compute_cmc_map(extract_features(model, query), extract_features(model, gallery), p["max_rank"], p["metric"])
    res.save(out / "eval.json")
    arch = "ibn" if model.config.get("use_ibn") else "baseline"
    method = model.extra.get("method", "direct")
    label = cfg["run"]["label"] or f"{arch}+{method}"
    if cfg["run"]["plots"]:
        plot_cmc({label: res}, out / "cmc.png")
    return {
        "label": label,
        "arch": arch,
        "method": method,
        "rank1": res.rank(1),
        "rank5": res.rank(5),
        "rank10": res.rank(10),
        "mAP": res.mAP,
        "skipped_queries": res.num_skipped,
        "protocol": res.protocol,
    }


def cmd_audit_identity(cfg, out):
    key = "inputs.classifier" if cfg["inputs"]["classifier"] else "inputs.dsem"
    classifier = ModelParams.load(_require(cfg, key))
    tpath = Path(_require(cfg, "inputs.translated"))
    translated = load_manifest(tpath / MANIFEST_NAME if tpath.is_dir() else tpath)
    method = _read_summary(translated.root).get("method", "unknown")
    summary = {
        "method": method,
        "identity_accuracy": identity_preservation_accuracy(classifier, translated),
        "num_images": len(translated),
    }
    if cfg["inputs"]["camera_classifier"]:
        cam = ModelParams.load(cfg["inputs"]["camera_classifier"])
        summary["camera_accuracy"] = camera_assignment_accuracy(cam, translated)
    return summary


_METHOD_ORDER = {"direct": 0, "stargan": 1, "ipgan": 2}
_METHOD_NAMES = {"direct": "Direct Transfer", "stargan": "StarGAN", "ipgan": "IPGAN"}


def _find_summaries(spec):
    found = []
    for item in [s.strip() for s in spec.split(",") if s.strip()]:
        p = Path(item)
        if p.is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob(SUMMARY)))
        else:
            raise RunError(f"no summaries at {p}")
    return found


def cmd_report(cfg, out):
    rows, audits = [], []
    for path in _find_summaries(_require(cfg, "inputs.summaries")):
        s = json.loads(path.read_text())
        if s.get("command") == "evaluate":
            rows.append(s)
        elif s.get("command") == "audit-identity":
            audits.append(s)
    rows.sort(key=lambda s: (s.get("arch") != "baseline", _METHOD_ORDER.get(s.get("method"), 9), s.get("label", "")))
    lines = [
        "| Method | rank-1 | rank-5 | rank-10 | mAP |",
        "|---|---|---|---|---|",
    ]
    table = []
    for s in rows:
        name = f"{'IBN-reID' if s['arch'] == 'ibn' else 'Baseline'}+{_METHOD_NAMES.get(s['method'], s['method'])}"
        lines.append(
            f"| {name} | {100 * s['rank1']:.1f} | {100 * s['rank5']:.1f} | {100 * s['rank10']:.1f} | {100 * s['mAP']:.1f} |"
        )
        table.append({"method": name, **{k: s[k] for k in ("rank1", "rank5", "rank10", "mAP")}})
    if audits:
        lines += ["", "| Translation | identity accuracy | camera accuracy |", "|---|---|---|"]
        for a in sorted(audits, key=lambda a: _METHOD_ORDER.get(a.get("method"), 9)):
            cam = a.get("camera_accuracy")
            lines.append(
                f"| {_METHOD_NAMES.get(a['method'], a['method'])} | {a['identity_accuracy']:.3f} | "
                f"{'-' if cam is None else f'{cam:.3f}'} |"
            )
    (out / "report.md").write_text("\n".join(lines) + "\n")
    (out / "report.json").write_text(json.dumps({"retrieval": table, "identity_audit": audits}, indent=2, sort_keys=True) + "\n")
    return {"num_evaluations": len(rows), "num_audits": len(audits), "report": "report.md"}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain-dsem": cmd_pretrain_dsem,
    "train-ipgan": cmd_train_ipgan,
    "translate": cmd_translate,
    "train-reid": cmd_train_reid,
    "evaluate": cmd_evaluate,
    "audit-identity": cmd_audit_identity,
    "report": cmd_report,
}


# ----------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="ipgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file, or the name of a bundled one (desk.cfg, paper.cfg)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override; repeatable")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<subcommand> or ./runs/<subcommand>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
    return parser


class _DirLock:
    def __init__(self, out):
        self.path = out / ".lock"
        self.fh = None

    def __enter__(self):
        self.fh = open(self.path, "w")
        try:
            fcntl.flock(self.fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            self.fh.close()
            raise RunError(f"another run holds {self.path}") from None
        return self

    def __exit__(self, *exc):
        fcntl.flock(self.fh, fcntl.LOCK_UN)
        self.fh.close()
        self.path.unlink(missing_ok=True)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.resolve(args.config, args.override, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ROOT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(max(1, args.threads))
    sentinel = out / SENTINEL
    try:
        with _DirLock(out):
            sentinel.write_text(f"{args.command} did not finish\n")
            (out / "config.resolved.cfg").write_text(cfgmod.dumps(cfg))
            summary = COMMANDS[args.command](cfg, out)
            summary = {"command": args.command, "seed": cfg["run"]["seed"], **summary}
            _write_summary(out, summary)
            sentinel.unlink()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("traceback", exc_info=True)
        return 1
    logger.info("%s finished; outputs in %s", args.command, out)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
