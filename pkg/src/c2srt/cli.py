"""Command-line entry point: ``c2srt <subcommand> ...``.

Subcommands: synth, ingest, mine, train, eval, gradcheck, ablation. Every
artifact-producing run writes ``<output>.manifest.json`` beside its output.
Exit codes: 0 success, 2 usage, 3 data/format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .dataio import (CategorySpace, DatasetFormatError, DegenerateInputError, SyntheticConfig,
                     from_arrays, generate_synthetic, load_dataset, save_dataset)
from .diffcore import (CheckpointError, ConfigurationError, NumericalError, OptimConfig, ShapeError,
                       finite_diff_check, load_checkpoint, save_checkpoint)
from .isr import IsrConfig
from .istgat import GraphIndex, ModelConfig
from .relgraph import (GraphError, MissingTranscriptError, OracleClient, ReplayClient, baseline_graph,
                       build_graph, graph_from_indices, load_graph, mine_relations, write_transcripts)
from .trainloss import LossConfig, Model, TrainConfig, new_model, total_loss, train, write_loss_log

logger = logging.getLogger("c2srt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- manifests -----------------------------------------------------------------

@dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    duration_s: float = 0.0

    def write(self, output) -> Path:
        path = Path(str(output) + ".manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(**paths) -> Dict[str, str]:
    return {k: file_hash(p) for k, p in paths.items() if p is not None}


def _config_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _sidecar(ckpt) -> Path:
    return Path(str(ckpt) + ".config.json")


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SyntheticConfig(seed=args.seed, dim=args.dim, patches=args.patches, n_seen=args.seen,
                          n_unseen=args.unseen, n_train=args.train, n_test=args.test,
                          labels_per_image=args.labels, n_adj=args.n_adj)
    try:
        cfg.check()
    except ValueError as e:
        raise UsageError(str(e))
    ds, truth, _ = generate_synthetic(cfg)
    save_dataset(ds, args.out)
    outputs = [args.out]
    if args.truth_graph:
        graph_from_indices(ds.categories.names, ds.categories.n_seen, truth, cfg.n_adj).save(args.truth_graph)
        outputs.append(args.truth_graph)
    if args.transcripts:
        names = ds.categories.names
        truth_names = {names[c]: [names[j] for j in nb] for c, nb in enumerate(truth)}
        client = OracleClient(truth_names, ds.categories.seen, seed=args.seed)
        write_transcripts(args.transcripts, client, ds.categories.seen, ds.categories.unseen, args.queries)
    args._outputs = outputs
    return EXIT_OK


def cmd_ingest(args) -> int:
    """Build a dataset from an ``.npz`` of precomputed embeddings."""
    arrays = np.load(args.npz, allow_pickle=False)
    need = ["train_patches", "train_globals", "train_labels", "test_patches", "test_globals",
            "test_labels", "text", "seen", "unseen"]
    missing = [k for k in need if k not in arrays]
    if missing:
        raise DatasetFormatError(f"npz lacks arrays: {', '.join(missing)}")
    cats = CategorySpace([str(s) for s in arrays["seen"]], [str(s) for s in arrays["unseen"]])
    text = arrays["text"]
    if text.ndim == 2:
        text = text[:, None, :]
    ds = from_arrays(cats, arrays["train_patches"], arrays["train_globals"], arrays["train_labels"],
                     arrays["test_patches"], arrays["test_globals"], arrays["test_labels"], text)
    save_dataset(ds, args.out)
    args._manifest.inputs = _hashes(npz=args.npz)
    args._outputs = [args.out]
    return EXIT_OK


def cmd_mine(args) -> int:
    ds = load_dataset(args.data)
    cats = ds.categories
    if args.baseline:
        graph = baseline_graph(args.baseline, cats.names, cats.n_seen, args.n_adj, args.seed, ds.text)
    else:
        if not args.transcripts:
            raise UsageError("mine needs --transcripts or --baseline")
        result = mine_relations(ReplayClient(args.transcripts), cats.seen, cats.unseen,
                                args.n_adj, args.queries)
        for name, d in result.diagnostics.items():
            if d.skipped_blocks or d.unmatched_names:
                logger.warning("%s: %d malformed blocks, %d unknown names", name,
                               d.skipped_blocks, len(d.unmatched_names))
        graph = build_graph(result.neighbors, cats.seen, cats.unseen, args.n_adj)
    graph.save(args.out)
    args._manifest.inputs = _hashes(data=args.data)
    args._outputs = [args.out]
    return EXIT_OK


def _parse_ablate(text: Optional[str]) -> set:
    if not text:
        return set()
    parts = {p.strip() for p in text.split(",") if p.strip()}
    bad = parts - {"isr", "ist", "dist"}
    if bad:
        raise UsageError(f"unknown --ablate entries: {', '.join(sorted(bad))}")
    return parts


def cmd_train(args) -> int:
    ablate = _parse_ablate(args.ablate)
    ds = load_dataset(args.data)
    loss_cfg = LossConfig(lam=args.lam, enable_isr="isr" not in ablate and args.alpha > 0,
                          enable_ist="ist" not in ablate, enable_dist="dist" not in ablate,
                          form=args.loss_form)
    alpha = args.alpha if args.alpha > 0 else 1.0
    isr_cfg = IsrConfig(mass_threshold=alpha, max_patches=args.max_patches,
                        inverse_temperature=args.inv_temp)
    mcfg = ModelConfig(dim=ds.manifest.dim, layers=args.layers, heads=args.heads)
    graph = load_graph(args.graph) if args.graph else None
    if loss_cfg.enable_ist and graph is None:
        raise UsageError("IST is enabled but no --graph was given (use --ablate ist to train without one)")
    if graph is not None and graph.categories != ds.categories.names:
        raise GraphError("graph categories do not match the dataset")
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                       optim=OptimConfig(lr=args.lr, weight_decay=args.weight_decay))
    model = new_model(mcfg, isr_cfg, loss_cfg, args.seed)
    progress = None if args.quiet else (
        lambda e: print(f"epoch {e.epoch}: cls {e.mean_cls:.4f} dist {e.mean_dist:.4f} total {e.total:.4f}",
                        file=sys.stderr))
    logs = train(ds, graph, tcfg, model, progress)
    save_checkpoint(model.store, args.out)
    _sidecar(args.out).write_text(json.dumps({
        "model": mcfg.to_dict(), "isr": asdict(isr_cfg), "loss": asdict(loss_cfg)}, indent=2) + "\n")
    if args.log:
        write_loss_log(args.log, logs)
    args._manifest.inputs = _hashes(data=args.data, graph=args.graph)
    args._outputs = [args.out]
    return EXIT_OK


def load_model(path) -> Model:
    store = load_checkpoint(path)
    side = _sidecar(path)
    if not side.exists():
        raise CheckpointError(f"missing model config {side}")
    cfg = json.loads(side.read_text())
    m = cfg["model"]
    mcfg = ModelConfig(dim=m["dim"], layers=m["layers"], heads=m["heads"], hidden=m["hidden"],
                       leaky_slope=m["leaky_slope"])
    return Model(store, mcfg, IsrConfig(**cfg["isr"]), LossConfig(**cfg["loss"]))


def cmd_eval(args) -> int:
    from .experiments import evaluate_model
    ds = load_dataset(args.data)
    model = load_model(args.model)
    graph = load_graph(args.graph) if args.graph else None
    if model.loss.enable_ist and graph is None:
        raise UsageError("model uses IST; pass --graph")
    if args.task == "zsl" and ds.categories.n_unseen == 0:
        raise UsageError("ZSL evaluation needs unseen categories, but the dataset has none")
    try:
        ks = [int(k) for k in args.k.split(",")]
    except ValueError:
        raise UsageError(f"bad --k list {args.k!r}")
    report = evaluate_model(model, ds, graph, args.task, ks)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        args._manifest.inputs = _hashes(data=args.data, model=args.model, graph=args.graph)
        args._outputs = [args.out]
    else:
        sys.stdout.write(text)
    return EXIT_OK


def tiny_gradcheck(corrupt: Optional[str] = None, eps: float = 1e-5, tol: float = 1e-4, seed: int = 0,
                   combos: Optional[Sequence[tuple]] = None):
    """Finite-difference check of ``total_loss`` on a tiny model for each ablation combination.

    ``corrupt`` names a parameter whose analytic gradient gets a spurious
    offset (test hook for the negative control). Returns
    ``[((isr, ist, dist), report), ...]``.
    """
    ds, _, _ = generate_synthetic(SyntheticConfig(seed=seed, dim=8, patches=6, n_seen=10, n_unseen=2,
                                                  n_train=4, n_test=2, labels_per_image=2, n_adj=3))
    S = ds.categories.n_seen
    gi = GraphIndex(baseline_graph("random", ds.categories.names, S, 3, seed=seed).restrict(S))
    tr = ds.train
    out = []
    for isr, ist, dist in combos or list(itertools.product([True, False], repeat=3)):
        model = new_model(ModelConfig(dim=8, layers=2, heads=2), IsrConfig(max_patches=6),
                          LossConfig(enable_isr=isr, enable_ist=ist, enable_dist=dist), seed)
        # move off the identity start so the L1 term is away from its kink
        rng = np.random.default_rng([seed, 1])
        for n in model.store.names():
            model.store.params[n] = model.store.params[n] + 0.05 * rng.standard_normal(model.store.params[n].shape)

        def loss_fn(store, backward, model=model):
            v = total_loss(model, tr.patches, tr.globals, tr.labels[:, :S], ds.text[:S], gi, backward).total
            if backward and corrupt is not None and corrupt in store.grads:
                store.grads[corrupt] += 1e-3
            return v

        out.append(((isr, ist, dist), finite_diff_check(loss_fn, model.store, eps=eps, tol=tol)))
    return out


def cmd_gradcheck(args) -> int:
    results = tiny_gradcheck(corrupt=args.corrupt, eps=args.eps, tol=args.tol, seed=args.seed)
    ok = True
    for (isr, ist, dist), rep in results:
        name, err = rep.worst
        status = "PASS" if rep.passed else "FAIL"
        line = f"{status} isr={int(isr)} ist={int(ist)} dist={int(dist)} max_rel_err={err:.3e} ({name})"
        if not rep.passed:
            ok = False
            line += " failing: " + ", ".join(rep.failing())
        print(line)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablation(args) -> int:
    from .experiments import run_suite, write_suite_csv
    if args.seeds < 5:
        raise UsageError("ablation needs at least 5 seeds")
    seeds = list(range(args.seed, args.seed + args.seeds))
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch)
    kw = {}
    if args.data:
        kw["dataset"] = load_dataset(args.data)
        if not args.graph:
            raise UsageError("with --data, pass --graph for the mined (llm) relation source")
        kw["given_graph"] = load_graph(args.graph)
    else:
        kw["synth"] = SyntheticConfig(seed=args.seed, dim=args.dim, n_seen=args.seen, n_unseen=args.unseen,
                                      n_train=args.train, n_test=args.test)
    progress = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    results = run_suite(args.suite, seeds, tcfg=tcfg, n_adj=args.n_adj, progress=progress, **kw)
    write_suite_csv(args.out, results)
    args._manifest.inputs = _hashes(data=args.data, graph=args.graph)
    args._outputs = [args.out]
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="c2srt", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a seeded synthetic dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--patches", type=int, default=16)
    s.add_argument("--seen", type=int, default=40)
    s.add_argument("--unseen", type=int, default=10)
    s.add_argument("--train", type=int, default=2000)
    s.add_argument("--test", type=int, default=500)
    s.add_argument("--labels", type=int, default=3, help="labels per image")
    s.add_argument("--n-adj", type=int, default=4, help="ground-truth neighbours per category")
    s.add_argument("--truth-graph", help="also write the ground-truth relation graph here")
    s.add_argument("--transcripts", help="also write oracle LLM transcripts to this directory")
    s.add_argument("--queries", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="build a dataset from precomputed embeddings (.npz)")
    s.add_argument("--npz", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("mine", parents=[common], help="build a relation graph")
    s.add_argument("--data", required=True)
    s.add_argument("--transcripts")
    s.add_argument("--baseline", choices=["random", "similarity"])
    s.add_argument("--n-adj", type=int, default=4)
    s.add_argument("--queries", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("train", parents=[common], help="train a model on seen categories")
    s.add_argument("--data", required=True)
    s.add_argument("--graph")
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--weight-decay", type=float, default=5e-3)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--heads", type=int, default=2)
    s.add_argument("--ablate", default="", help="comma list from isr,ist,dist")
    s.add_argument("--loss-form", choices=["prose", "printed"], default="prose")
    s.add_argument("--alpha", type=float, default=0.5, help="ISR mass threshold; 0 disables ISR")
    s.add_argument("--max-patches", type=int, default=32)
    s.add_argument("--inv-temp", type=float, default=100.0)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--graph")
    s.add_argument("--task", choices=["zsl", "gzsl"], default="zsl")
    s.add_argument("--k", default="3,5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--corrupt", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablation", parents=[common], help="run an ablation grid over seeds")
    s.add_argument("--suite", choices=["table2", "table3", "alpha", "lambda"], required=True)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--data")
    s.add_argument("--graph")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--n-adj", type=int, default=4)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--seen", type=int, default=40)
    s.add_argument("--unseen", type=int, default=10)
    s.add_argument("--train", type=int, default=2000)
    s.add_argument("--test", type=int, default=500)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablation)
    return p


def _limit_threads(n: Optional[int]) -> None:
    """Cap BLAS threads; numpy is already loaded, so this needs threadpoolctl."""
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        logger.warning("--threads ignored: threadpoolctl is not installed (set OMP_NUM_THREADS instead)")
        return
    threadpool_limits(n)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _limit_threads(args.threads)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args._manifest = RunManifest(args.command, _config_of(args))
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as e:
        print(f"c2srt {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, DegenerateInputError, CheckpointError, GraphError,
            MissingTranscriptError, ShapeError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"c2srt {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"c2srt {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ValueError) as e:
        print(f"c2srt {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    args._manifest.duration_s = round(time.perf_counter() - t0, 3)
    for out in getattr(args, "_outputs", []):
        args._manifest.write(out)
    return code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
