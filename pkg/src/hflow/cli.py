"""Operator CLI: dataset generation, base/adapter training, episodic eval, ablation.

Commands are deterministic under a fixed seed; outputs land only under the
declared --out directory; every artifact-producing command writes one JSON
run manifest next to its outputs (timestamps live only there). Exit codes:
0 success, 1 validation/usage error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__, data, model, verify
from .errors import DimMismatch, HflowError, ValidationError
from .losses import BetaSchedule

# Reserved episode index for the training episode of `train-adapter`, far
# away from the evaluation indices 0..episodes-1.
TRAIN_EPISODE_INDEX = 2**32 - 1


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Evaluation engine
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-episode accuracies plus mean and 95% CI half-width (1.96 * stderr)."""

    top1: list[float]
    top5: list[float]

    @property
    def episode_count(self) -> int:
        return len(self.top1)

    @staticmethod
    def _summary(values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values)
        mean = float(arr.mean())
        if arr.size < 2:
            return mean, 0.0
        half = 1.96 * float(arr.std(ddof=1)) / np.sqrt(arr.size)
        return mean, half

    def mean_top1(self):
        return self._summary(self.top1)

    def mean_top5(self):
        return self._summary(self.top5)


def worker_count() -> int:
    """Episode parallelism cap from HFLOW_THREADS (default 1)."""
    raw = os.environ.get("HFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"HFLOW_THREADS={raw!r} is not an integer") from None
    return max(1, n)


def run_episodes(init: model.AdapterModel | None, ds: data.EmbeddingDataset,
                 espec: data.EpisodeSpec, cfg: model.TrainConfig,
                 threads: int = 1) -> EvalReport:
    """Per episode: fine-tune an adapter on the support set, then score the
    query set with deterministic posterior-mean logits.

    With ``init`` set (the CLI checkpoint path) every episode starts from a
    clone of it. With ``init=None`` each episode trains from a fresh
    seeded initialization, which is the right design for paired
    architecture comparisons: initialization luck averages out over
    episodes instead of entering once per arm. Either way an episode
    depends only on (seed, episode_index), so parallel workers cannot
    change the result.
    """
    if init is not None:
        if ds.dim != init.embedding_dim:
            raise DimMismatch(f"dataset dim {ds.dim} != checkpoint embedding dim "
                              f"{init.embedding_dim}")
        if espec.n_way != init.class_count:
            raise DimMismatch(f"n_way {espec.n_way} != checkpoint class count "
                              f"{init.class_count}")

    def one(episode_index: int) -> tuple[float, float]:
        support, query = data.sample_episode(ds, espec, episode_index)
        xs_s, ys_s, xs_q, ys_q, _ = data.episode_arrays(ds, support, query)
        if init is None:
            m = model.init_adapter(ds.dim, espec.n_way, cfg,
                                   data.episode_rng(cfg.seed, episode_index, stream=2))
        else:
            m = model.clone_adapter(init)
        rng = data.episode_rng(cfg.seed, episode_index, stream=1)
        model.train_adapter(m, xs_s, ys_s, cfg, rng)
        hit1, hit5 = model.topk_hits(m, xs_q, ys_q, k=5)
        return hit1 / len(ys_q), hit5 / len(ys_q)

    indices = range(espec.episode_count)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, espec.episode_count)) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(e) for e in indices]
    return EvalReport(top1=[r[0] for r in results], top5=[r[1] for r in results])


def train_adapter_once(ds: data.EmbeddingDataset, espec: data.EpisodeSpec,
                       cfg: model.TrainConfig) -> tuple[model.AdapterModel, list, dict]:
    """Train a fresh adapter on the reserved training episode of the dataset.

    The episode's support set is the training data; its query set is the
    validation metric feeding the plateau scheduler. Returns the model, the
    per-step loss log rows, and the training summary.
    """
    support, query = data.sample_episode(ds, espec, TRAIN_EPISODE_INDEX)
    xs_s, ys_s, xs_q, ys_q, _ = data.episode_arrays(ds, support, query)
    m = model.init_adapter(ds.dim, espec.n_way, cfg, np.random.default_rng(cfg.seed))
    rows: list = []
    summary = model.train_adapter(m, xs_s, ys_s, cfg, np.random.default_rng(cfg.seed),
                                  xs_val=xs_q, ys_val=ys_q, log_rows=rows)
    return m, rows, summary


# ---------------------------------------------------------------------------
# Manifest and CSV helpers
# ---------------------------------------------------------------------------

def write_run_manifest(out_dir: str, command: str, config: dict, seed: int,
                       outputs: list[str], name: str = "run") -> str:
    path = os.path.join(out_dir, f"{name}.manifest.json")
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "created_unix": time.time(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": outputs,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_dataset(args, split_tag="novel") -> data.EmbeddingDataset:
    if args.manifest:
        manifest = data.load_split_manifest(args.manifest)
        seen, novel = data.load_split(manifest)
        return seen if split_tag == "seen" else novel
    if not args.dataset:
        raise UsageError("either --dataset or --manifest is required")
    return data.load_embeddings(args.dataset, split_tag=split_tag)


def _train_config(args, flow_length=None, hidden=None, latent=None,
                  activation=None, epochs=None) -> model.TrainConfig:
    sched = BetaSchedule(beta_start=args.beta_start, beta_end=args.beta_end,
                         anneal_epochs=args.anneal_epochs)
    return model.TrainConfig(
        learning_rate=args.lr,
        plateau_patience=args.patience,
        adapter_batch=args.batch,
        flow_length_T=args.flow_length if flow_length is None else flow_length,
        beta_schedule=sched,
        max_epochs=args.epochs if epochs is None else epochs,
        seed=args.seed,
        hidden_dim=args.hidden_dim if hidden is None else hidden,
        latent_dim=args.latent_dim if latent is None else latent,
        reflector_activation=args.activation if activation is None else activation,
    )


def _episode_spec(args, episode_count=None) -> data.EpisodeSpec:
    return data.EpisodeSpec(n_way=args.n_way, k_shot=args.k_shot, n_query=args.n_query,
                            episode_count=args.episodes if episode_count is None
                            else episode_count, seed=args.seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    out = _ensure_out(args)
    spec = data.SynthSpec(class_count=args.classes, dim=args.dim,
                          samples_per_class=args.samples_per_class,
                          covariance_mode=args.covariance, noise_scale=args.noise_scale,
                          seed=args.seed, mean_scale=args.mean_scale,
                          cov_spread=args.cov_spread)
    ds = data.generate_synthetic(spec, split_tag=args.split_tag)
    path = os.path.join(out, f"{args.name}.hfemb")
    data.save_embeddings(path, ds)
    write_run_manifest(out, "gen-synth", asdict(spec), args.seed, [path], name=args.name)
    print(f"wrote {path}: {spec.class_count} classes x {spec.samples_per_class} "
          f"samples, dim {spec.dim}, covariance {spec.covariance_mode}")
    return 0


def cmd_train_base(args) -> int:
    out = _ensure_out(args)
    ds = _load_dataset(args, split_tag="seen")
    rng = np.random.default_rng(args.seed)
    enc = model.init_base_encoder(ds.dim, [args.base_hidden], args.embed_dim,
                                  len(ds.class_names), rng)
    xs, ys = ds.matrix()
    base_cfg = model.TrainConfig(learning_rate=args.lr, base_batch=args.batch,
                                 max_epochs=args.epochs, seed=args.seed,
                                 plateau_patience=args.patience)
    history = model.train_base(enc, xs, ys, base_cfg, rng)
    ckpt = os.path.join(out, "base.hflow")
    model.save_base(ckpt, enc, base_cfg)
    log = os.path.join(out, "base_log.csv")
    _write_csv(log, ["epoch", "loss"],
               [(e, f"{v:.10g}") for e, v in enumerate(history)])
    write_run_manifest(out, "train-base", asdict(base_cfg), args.seed, [ckpt, log],
                       name="base")
    print(f"wrote {ckpt}; final epoch loss {history[-1]:.4f}")
    return 0


def cmd_extract(args) -> int:
    out = _ensure_out(args)
    ds = _load_dataset(args, split_tag=args.split_tag)
    enc, _ = model.load_base(args.base)
    if enc.input_dim != ds.dim:
        raise DimMismatch(f"base encoder expects dim {enc.input_dim}, dataset has {ds.dim}")
    records = []
    for rec in ds.records:
        emb, _ = model.base_forward(enc, rec.vector)
        records.append(data.EmbeddingRecord(label=rec.label, vector=emb,
                                            source_id=rec.source_id))
    emb_ds = data.EmbeddingDataset(dim=enc.output_dim, class_names=ds.class_names,
                                   records=records, split_tag=ds.split_tag)
    path = os.path.join(out, f"{args.name}.hfemb")
    data.save_embeddings(path, emb_ds)
    write_run_manifest(out, "extract", {"base": args.base, "records": len(records)},
                       args.seed, [path], name=args.name)
    print(f"wrote {path}: {len(records)} embeddings of dim {enc.output_dim}")
    return 0


def cmd_train_adapter(args) -> int:
    out = _ensure_out(args)
    ds = _load_dataset(args)
    espec = _episode_spec(args, episode_count=1)
    cfg = _train_config(args)
    m, rows, summary = train_adapter_once(ds, espec, cfg)
    ckpt = os.path.join(out, "adapter.hflow")
    model.save_adapter(ckpt, m, cfg)
    log = os.path.join(out, "train_log.csv")
    _write_csv(log, ["epoch", "step", "ce", "kl", "beta", "total", "lr"],
               [(e, s, f"{ce:.10g}", f"{kl:.10g}", f"{b:.10g}", f"{t:.10g}", f"{lr:.10g}")
                for e, s, ce, kl, b, t, lr in rows])
    config = {"train": asdict(cfg), "episode": asdict(espec)}
    write_run_manifest(out, "train-adapter", config, args.seed, [ckpt, log],
                       name="adapter")
    print(f"wrote {ckpt}; first CE {summary['first_ce']:.4f}, "
          f"last CE {summary['last_ce']:.4f}, final lr {summary['final_lr']:.2e}")
    return 0


def _format_report(report: EvalReport, n_way: int) -> str:
    m1, h1 = report.mean_top1()
    m5, h5 = report.mean_top5()
    lines = [
        f"episodes      {report.episode_count}",
        f"top-1         {100 * m1:.2f} +/- {100 * h1:.2f} (95% CI)",
        f"top-5         {100 * m5:.2f} +/- {100 * h5:.2f} (95% CI)",
        f"n_way         {n_way}",
    ]
    return "\n".join(lines)


def _report_rows(report: EvalReport):
    rows = [(e, f"{t1:.6f}", f"{t5:.6f}")
            for e, (t1, t5) in enumerate(zip(report.top1, report.top5))]
    m1, h1 = report.mean_top1()
    m5, h5 = report.mean_top5()
    rows.append(("mean", f"{m1:.6f}", f"{m5:.6f}"))
    rows.append(("ci95_half_width", f"{h1:.6f}", f"{h5:.6f}"))
    return rows


def cmd_eval(args) -> int:
    out = _ensure_out(args)
    ds = _load_dataset(args)
    init, header = model.load_adapter(args.checkpoint)
    espec = _episode_spec(args)
    cfg = model.TrainConfig(
        learning_rate=args.lr, plateau_patience=args.patience,
        adapter_batch=args.batch, flow_length_T=int(header["flow_length"]),
        beta_schedule=BetaSchedule(args.beta_start, args.beta_end, args.anneal_epochs),
        max_epochs=args.finetune_epochs, seed=args.seed,
        hidden_dim=int(header["hidden_dim"]), latent_dim=int(header["latent_dim"]),
        reflector_activation=header.get("reflector_activation", "none"),
    )
    report = run_episodes(init, ds, espec, cfg, threads=worker_count())
    path = os.path.join(out, "eval.csv")
    _write_csv(path, ["episode", "top1", "top5"], _report_rows(report))
    config = {"train": asdict(cfg), "episode": asdict(espec),
              "checkpoint": args.checkpoint}
    write_run_manifest(out, "eval", config, args.seed, [path], name="eval")
    print(_format_report(report, espec.n_way))
    print(f"wrote {path}")
    return 0


def ablate_cell(ds: data.EmbeddingDataset, args, t_len: int, k_shot: int,
                threads: int) -> EvalReport:
    """One grid cell: train a checkpoint, then evaluate episodically."""
    espec = data.EpisodeSpec(n_way=args.n_way, k_shot=k_shot, n_query=args.n_query,
                             episode_count=args.episodes, seed=args.seed)
    cfg = _train_config(args, flow_length=t_len)
    init, _, _ = train_adapter_once(ds, espec, cfg)
    return run_episodes(init, ds, espec, cfg, threads=threads)


def cmd_ablate_length(args) -> int:
    out = _ensure_out(args)
    ds = _load_dataset(args)
    threads = worker_count()
    t_values = [int(t) for t in args.t_list.split(",")]
    k_values = [int(k) for k in args.k_list.split(",")]
    rows = []
    failures = 0
    for t_len in t_values:
        for k_shot in k_values:
            try:
                report = ablate_cell(ds, args, t_len, k_shot, threads)
                m1, h1 = report.mean_top1()
                m5, h5 = report.mean_top5()
                rows.append((t_len, k_shot, "ok", f"{m1:.6f}", f"{h1:.6f}",
                             f"{m5:.6f}", f"{h5:.6f}", report.episode_count))
                print(f"T={t_len:<3} k={k_shot:<2} top1 {100 * m1:6.2f} +/- {100 * h1:.2f}")
            except HflowError as exc:  # record the cell, keep the grid going
                failures += 1
                rows.append((t_len, k_shot, f"error: {exc}", "", "", "", "", 0))
                print(f"T={t_len:<3} k={k_shot:<2} failed: {exc}", file=sys.stderr)
    path = os.path.join(out, "ablation.csv")
    _write_csv(path, ["flow_length", "k_shot", "status", "top1_mean", "top1_ci95",
                      "top5_mean", "top5_ci95", "episodes"], rows)
    config = {"t_values": t_values, "k_values": k_values,
              "n_way": args.n_way, "n_query": args.n_query, "episodes": args.episodes}
    write_run_manifest(out, "ablate-length", config, args.seed, [path], name="ablation")
    print(f"wrote {path}")
    return 0 if failures == 0 else 2


def cmd_verify(args) -> int:
    names = args.suite.split(",") if args.suite else None
    results = verify.run_suites(names)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 2


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_dataset_flags(p):
    p.add_argument("--dataset", help="HFEMB1 embedding file")
    p.add_argument("--manifest", help="split manifest declaring seen/novel files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)


def _add_episode_flags(p):
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=5)
    p.add_argument("--n-query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=400)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta-start", type=float, default=1.0)
    p.add_argument("--beta-end", type=float, default=0.0)
    p.add_argument("--anneal-epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--activation", choices=["none", "tanh"], default="none")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hflow",
                     description="Householder-flow few-shot adapter toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate synthetic Gaussian clusters")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--samples-per-class", type=int, default=100)
    p.add_argument("--covariance", choices=list(data.COVARIANCE_MODES), default="full")
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--mean-scale", type=float, default=2.0)
    p.add_argument("--cov-spread", type=float, default=4.0)
    p.add_argument("--split-tag", choices=list(data.SPLIT_TAGS), default="novel")
    p.add_argument("--name", default="synth")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-base", help="train the toy base encoder on seen classes")
    _add_dataset_flags(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=150)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--base-hidden", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=256)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("extract", help="write base-encoder embeddings for a dataset")
    _add_dataset_flags(p)
    p.add_argument("--base", required=True, help="base encoder checkpoint")
    p.add_argument("--split-tag", choices=list(data.SPLIT_TAGS), default="novel")
    p.add_argument("--name", default="embeddings")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-adapter", help="train the flow adapter on one episode")
    _add_dataset_flags(p)
    _add_episode_flags(p)
    _add_train_flags(p)
    p.add_argument("--flow-length", type=int, default=3)
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("eval", help="episodic evaluation with per-episode fine-tuning")
    _add_dataset_flags(p)
    _add_episode_flags(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True, help="adapter checkpoint")
    p.add_argument("--finetune-epochs", type=int, default=50)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-length", help="flow-length x shot grid experiment")
    _add_dataset_flags(p)
    _add_episode_flags(p)
    _add_train_flags(p)
    p.add_argument("--t-list", default="1,3,10,20", help="comma-separated flow lengths")
    p.add_argument("--k-list", default="1,5", help="comma-separated shot counts")
    p.set_defaults(func=cmd_ablate_length)

    p = sub.add_parser("verify", help="run the self-verification property suites")
    p.add_argument("--suite", help="comma-separated subset of: "
                   + ", ".join(verify.SUITE_NAMES))
    p.set_defaults(func=cmd_verify)

    return parser


def _validate(args) -> None:
    if getattr(args, "k_shot", 1) < 1:
        raise UsageError("--k-shot must be >= 1")
    if getattr(args, "n_query", 1) < 1:
        raise UsageError("--n-query must be >= 1")
    if getattr(args, "n_way", 2) < 2:
        raise UsageError("--n-way must be >= 2")
    if getattr(args, "episodes", 1) < 1:
        raise UsageError("--episodes must be >= 1")
    if getattr(args, "flow_length", 0) < 0:
        raise UsageError("--flow-length must be >= 0")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except HflowError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except np.linalg.LinAlgError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
