"""Command-line pipeline: generate -> fit-pca -> mine -> train -> probe,
plus compare and bench.

One JSON config file drives everything; command-line flags win over the
file. All randomness derives from the single top-level seed via
util.derive_seed(seed, stage), so one number reproduces the whole run.
Artifacts live under the output directory with fixed names and form a
hash-verified chain: corpus -> PCA model -> pair manifest -> encoder.

Exit codes: 0 success, 1 usage/config, 2 data error, 3 missing or stale
upstream artifact.
"""

import argparse
import copy
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import embed as embed_mod
from . import mine as mine_mod
from . import synth as synth_mod
from . import train as train_mod
from .errors import HandPairError, StaleArtifact
from .util import derive_seed, require_file, sha256_file

ARTIFACTS = {
    "corpus": "corpus.jsonl",
    "truth": "ground_truth.jsonl",
    "model": "pca.model",
    "model_text": "pca.model.txt",
    "pairs": "pairs.txt",
    "encoder": "encoder.bin",
    "train_report": "train_report.json",
    "train_log": "train_log.txt",
    "probe_report": "probe_report.json",
    "compare_report": "compare_report.json",
    "bench_report": "bench_report.json",
}

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": {
        "n_videos": 50,
        "crops_per_video": 100,
        "keypoint_noise_sigma": 0.01,
        "intra_video_drift": 0.05,
        "confidence_threshold": 0.5,
    },
    "pca": {"d_out": 14, "max_fit_samples": 200000},
    "mining": {"mode": "exact", "max_distance": None, "top_k": 1},
    "loss": {
        "temperature": 0.5,
        "rotation_range": 1.5707963267948966,
        "scale_range": [0.8, 1.2],
        "translation_range": 0.1,
    },
    "train": {
        "pair_source": "mined_pairs",
        "batch_pairs": 32,
        "steps": 1000,
        "learning_rate": 0.3,
        "hidden_dim": 64,
        "embed_dim": 32,
        "projection_dim": 16,
        "nuisance_dims": 16,
        "nuisance_scale": 1.0,
        "nuisance_noise": 0.1,
    },
    "compare": {"seeds": [0, 1, 2, 3, 4]},
    "bench": {"sizes": [10000, 100000]},
    "paths": {"out_dir": "artifacts"},
}


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(require_file(path, "config file"), "r", encoding="utf-8") as f:
            cfg = _merge(cfg, json.load(f))
    return cfg


def validate_config(cfg: dict) -> None:
    if not 1 <= cfg["pca"]["d_out"] <= 42:
        raise ValueError(f"pca.d_out must be in [1, 42], got {cfg['pca']['d_out']}")
    if cfg["loss"]["temperature"] <= 0:
        raise ValueError("loss.temperature must be > 0")
    if cfg["mining"]["mode"] not in ("exact", "approx"):
        raise ValueError(f"mining.mode must be exact or approx, got {cfg['mining']['mode']}")
    out_dir = Path(cfg["paths"]["out_dir"])
    if out_dir.exists() and not out_dir.is_dir():
        raise ValueError(f"paths.out_dir {out_dir} is not a directory")


def _apply_flags(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg["paths"]["out_dir"] = args.out
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    else:
        cfg.setdefault("threads", 1)
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _art(cfg: dict, name: str) -> Path:
    return _out_dir(cfg) / ARTIFACTS[name]


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(cfg: dict, pair_source=None, seed=None) -> train_mod.TrainConfig:
    t = cfg["train"]
    return train_mod.TrainConfig(
        pair_source=pair_source or t["pair_source"],
        batch_pairs=t["batch_pairs"],
        steps=t["steps"],
        learning_rate=t["learning_rate"],
        seed=cfg["seed"] if seed is None else seed,
        temperature=cfg["loss"]["temperature"],
        hidden_dim=t["hidden_dim"],
        embed_dim=t["embed_dim"],
        projection_dim=t["projection_dim"],
        rotation_range=cfg["loss"]["rotation_range"],
        scale_range=tuple(cfg["loss"]["scale_range"]),
        translation_range=cfg["loss"]["translation_range"],
        nuisance_noise=t["nuisance_noise"],
    )


def _synth_config(cfg: dict, seed=None) -> synth_mod.SynthConfig:
    s = cfg["synth"]
    return synth_mod.SynthConfig(
        n_videos=s["n_videos"],
        crops_per_video=s["crops_per_video"],
        keypoint_noise_sigma=s["keypoint_noise_sigma"],
        intra_video_drift=s["intra_video_drift"],
        seed=derive_seed(cfg["seed"], "synth") if seed is None else seed,
    )


def cmd_generate(cfg: dict, args) -> int:
    corpus, truth = synth_mod.generate_corpus(_synth_config(cfg))
    corpus = corpus_mod.filter_by_confidence(
        corpus, cfg["synth"]["confidence_threshold"]
    )
    corpus = corpus_mod.balance_handedness(corpus, seed=derive_seed(cfg["seed"], "balance"))
    truth = {c.crop_id: truth[c.crop_id] for c in corpus}
    corpus_path = _art(cfg, "corpus")
    corpus_mod.save_manifest(corpus, corpus_path)
    synth_mod.save_ground_truth(truth, _art(cfg, "truth"))
    print(
        f"generate: wrote {len(corpus)} crops across {corpus.n_videos} videos "
        f"-> {corpus_path}"
    )
    return 0


def cmd_fit_pca(cfg: dict, args) -> int:
    corpus_path = require_file(_art(cfg, "corpus"), "corpus manifest")
    corpus = corpus_mod.load_manifest(corpus_path)
    vectors = embed_mod.vectorize_corpus(corpus)
    model = embed_mod.pca_fit(
        vectors,
        d_out=cfg["pca"]["d_out"],
        sample_seed=derive_seed(cfg["seed"], "pca"),
        max_fit_samples=cfg["pca"]["max_fit_samples"],
    )
    model.fit_source_hash = sha256_file(corpus_path)
    embed_mod.save_model(model, _art(cfg, "model"))
    embed_mod.export_model_text(model, _art(cfg, "model_text"))
    ev = embed_mod.explained_variance(model, model.d_out)
    flag = " (rank deficient)" if model.rank_deficient else ""
    print(
        f"fit-pca: d_out={model.d_out} explains {ev:.4f} of variance over "
        f"{model.n_fit_samples} samples{flag} -> {_art(cfg, 'model')}"
    )
    return 0


def cmd_mine(cfg: dict, args) -> int:
    corpus_path = require_file(_art(cfg, "corpus"), "corpus manifest")
    model_path = require_file(_art(cfg, "model"), "PCA model")
    corpus_hash = sha256_file(corpus_path)
    model = embed_mod.load_model(model_path)
    if model.fit_source_hash and model.fit_source_hash != corpus_hash:
        raise StaleArtifact(
            f"PCA model was fitted on a different corpus "
            f"(model says {model.fit_source_hash[:12]}..., corpus is {corpus_hash[:12]}...)"
        )
    corpus = corpus_mod.load_manifest(corpus_path)
    index = mine_mod.build_index(corpus, model, mode=mine_mod.IndexMode(cfg["mining"]["mode"]))
    manifest = mine_mod.mine_all(
        index,
        max_distance=cfg["mining"]["max_distance"],
        top_k=cfg["mining"]["top_k"],
        threads=cfg.get("threads", 1),
        seed=derive_seed(cfg["seed"], "mine"),
    )
    mine_mod.verify_exclusion(manifest, corpus)
    manifest = replace(
        manifest, corpus_hash=corpus_hash, model_hash=sha256_file(model_path)
    )
    mine_mod.save_pairs(manifest, _art(cfg, "pairs"))
    mean_d = float(np.mean([d for _, _, d in manifest.pairs])) if manifest.pairs else float("nan")
    print(
        f"mine: {len(manifest)} pairs ({manifest.mode}), mean distance {mean_d:.6f} "
        f"-> {_art(cfg, 'pairs')}"
    )
    return 0


def _check_pairs_fresh(cfg: dict, manifest, corpus_path, model_path) -> None:
    if manifest.corpus_hash and manifest.corpus_hash != sha256_file(corpus_path):
        raise StaleArtifact("pair manifest was mined from a different corpus")
    if model_path.is_file() and manifest.model_hash and manifest.model_hash != sha256_file(model_path):
        raise StaleArtifact("pair manifest was mined with a different PCA model")


def cmd_train(cfg: dict, args) -> int:
    corpus_path = require_file(_art(cfg, "corpus"), "corpus manifest")
    corpus = corpus_mod.load_manifest(corpus_path)
    tcfg = _train_config(cfg)
    obs = train_mod.build_observations(
        corpus,
        nuisance_dims=cfg["train"]["nuisance_dims"],
        nuisance_scale=cfg["train"]["nuisance_scale"],
        seed=derive_seed(cfg["seed"], "nuisance"),
    )
    pairs_rows = None
    provenance = {"corpus_sha256": sha256_file(corpus_path)}
    if tcfg.pair_source is train_mod.PairSource.MINED_PAIRS:
        pairs_path = require_file(_art(cfg, "pairs"), "pair manifest")
        manifest = mine_mod.load_pairs(pairs_path)
        _check_pairs_fresh(cfg, manifest, corpus_path, _art(cfg, "model"))
        row_of = {c.crop_id: i for i, c in enumerate(corpus)}
        pairs_rows = np.array([(row_of[q], row_of[p]) for q, p, _ in manifest.pairs])
        provenance["pairs_sha256"] = sha256_file(pairs_path)
    enc, history = train_mod.pretrain(obs, tcfg, pairs=pairs_rows)
    train_mod.save_encoder(enc, _art(cfg, "encoder"))
    with open(_art(cfg, "train_log"), "w", encoding="utf-8") as f:
        for step, loss in history:
            f.write(f"{step} {loss!r}\n")
    report = {
        "pair_source": tcfg.pair_source.value,
        "steps": tcfg.steps,
        "batch_pairs": tcfg.batch_pairs,
        "learning_rate": tcfg.learning_rate,
        "temperature": tcfg.temperature,
        "seed": cfg["seed"],
        "final_loss": history[-1][1] if history else None,
        "provenance": provenance,
    }
    _write_json(_art(cfg, "train_report"), report)
    print(
        f"train: {tcfg.pair_source.value} for {tcfg.steps} steps, "
        f"final loss {report['final_loss']:.6f} -> {_art(cfg, 'encoder')}"
    )
    return 0


def cmd_probe(cfg: dict, args) -> int:
    corpus_path = require_file(_art(cfg, "corpus"), "corpus manifest")
    truth_path = require_file(_art(cfg, "truth"), "ground-truth sidecar")
    encoder_path = require_file(_art(cfg, "encoder"), "trained encoder")
    corpus = corpus_mod.load_manifest(corpus_path)
    truth = synth_mod.load_ground_truth(truth_path)
    enc = train_mod.load_encoder(encoder_path)
    obs = train_mod.build_observations(
        corpus,
        nuisance_dims=cfg["train"]["nuisance_dims"],
        nuisance_scale=cfg["train"]["nuisance_scale"],
        seed=derive_seed(cfg["seed"], "nuisance"),
    )
    targets = train_mod.build_targets(corpus, truth)
    mse = train_mod.linear_probe(enc, obs, targets, seed=derive_seed(cfg["seed"], "probe"))
    report = {
        "probe_mse": mse,
        "n_samples": len(corpus),
        "provenance": {
            "corpus_sha256": sha256_file(corpus_path),
            "encoder_sha256": sha256_file(encoder_path),
        },
    }
    _write_json(_art(cfg, "probe_report"), report)
    print(f"probe: held-out MSE {mse:.6f} -> {_art(cfg, 'probe_report')}")
    return 0


def cmd_compare(cfg: dict, args) -> int:
    report = train_mod.compare_pair_sources(
        _synth_config(cfg, seed=0),
        _train_config(cfg),
        seeds=cfg["compare"]["seeds"],
        nuisance_dims=cfg["train"]["nuisance_dims"],
        nuisance_scale=cfg["train"]["nuisance_scale"],
        pca_d_out=cfg["pca"]["d_out"],
    )
    med = report["medians"]
    mined = med[train_mod.PairSource.MINED_PAIRS.value]
    self_aug = med[train_mod.PairSource.SELF_AUGMENT.value]
    equi = med[train_mod.PairSource.SELF_AUGMENT_EQUIVARIANT.value]
    report["mined_vs_self_improvement"] = (
        (self_aug - mined) / self_aug if self_aug > 0 else float("nan")
    )
    report["ordering_holds"] = bool(mined <= equi <= self_aug)
    _write_json(_art(cfg, "compare_report"), report)
    print(
        "compare: median probe MSE "
        f"mined={mined:.5f} equivariant={equi:.5f} self={self_aug:.5f} "
        f"(mined improves on self by {report['mined_vs_self_improvement']:.1%}) "
        f"-> {_art(cfg, 'compare_report')}"
    )
    return 0


def cmd_bench(cfg: dict, args) -> int:
    sizes = args.sizes if getattr(args, "sizes", None) else cfg["bench"]["sizes"]
    threads = cfg.get("threads", 1)
    if threads <= 1:
        import os

        threads = max(2, os.cpu_count() or 2)
    rows = []
    for n in sizes:
        crops_per_video = 100
        n_videos = max(2, n // crops_per_video)
        scfg = synth_mod.SynthConfig(
            n_videos=n_videos,
            crops_per_video=crops_per_video,
            keypoint_noise_sigma=0.01,
            intra_video_drift=0.05,
            seed=derive_seed(cfg["seed"], f"bench-{n}"),
        )
        corpus, _ = synth_mod.generate_corpus(scfg)
        corpus = corpus_mod.convert_all_right(corpus)
        model = embed_mod.pca_fit(
            embed_mod.vectorize_corpus(corpus),
            d_out=cfg["pca"]["d_out"],
            sample_seed=derive_seed(cfg["seed"], "pca"),
            max_fit_samples=cfg["pca"]["max_fit_samples"],
        )
        t0 = time.perf_counter()
        index = mine_mod.build_index(
            corpus, model, mode=mine_mod.IndexMode(cfg["mining"]["mode"])
        )
        build_s = time.perf_counter() - t0

        t0 = time.perf_counter()
        single = mine_mod.mine_all(index, threads=1)
        single_s = time.perf_counter() - t0

        t0 = time.perf_counter()
        multi = mine_mod.mine_all(index, threads=threads)
        multi_s = time.perf_counter() - t0

        identical = single.pairs == multi.pairs
        row = {
            "n": len(corpus),
            "d_out": model.d_out,
            "build_index_s": build_s,
            "mine_single_s": single_s,
            "mine_multi_s": multi_s,
            "threads": threads,
            "queries_per_s_single": len(corpus) / single_s if single_s > 0 else None,
            "multi_identical_to_single": identical,
        }
        rows.append(row)
        print(
            f"bench: n={row['n']} build {build_s:.2f}s, mine single {single_s:.2f}s "
            f"({row['queries_per_s_single']:.0f} q/s), multi x{threads} {multi_s:.2f}s, "
            f"identical={identical}"
        )
    report = {"mode": cfg["mining"]["mode"], "results": rows}
    if len(rows) >= 2 and all(r["mine_single_s"] > 0 for r in rows):
        ns = np.log([r["n"] for r in rows])
        ts = np.log([r["mine_single_s"] for r in rows])
        report["single_thread_scaling_exponent"] = float(np.polyfit(ns, ts, 1)[0])
    _write_json(_art(cfg, "bench_report"), report)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "fit-pca": cmd_fit_pca,
    "mine": cmd_mine,
    "train": cmd_train,
    "probe": cmd_probe,
    "compare": cmd_compare,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="handpair",
        description="Similar-hand pair mining and contrastive pre-training pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="top-level seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads")
        p.add_argument("--out", type=str, default=None, help="artifact directory")
        if name == "bench":
            p.add_argument(
                "--sizes", type=int, nargs="+", default=None,
                help="embedding counts to benchmark",
            )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        cfg = _apply_flags(cfg, args)
        validate_config(cfg)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except StaleArtifact as e:
        print(f"stale artifact: {e}", file=sys.stderr)
        return 3
    except HandPairError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
