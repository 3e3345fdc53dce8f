"""Train-and-evaluate cells for the ablation grids."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .dataio import Dataset, SyntheticConfig, generate_synthetic
from .isr import IsrConfig
from .istgat import ModelConfig
from .metrics import evaluate
from .relgraph import RelationGraph, baseline_graph, graph_from_indices
from .trainloss import LossConfig, Model, TrainConfig, new_model, train


def evaluate_model(model: Model, ds: Dataset, graph: Optional[RelationGraph], task: str,
                   ks: Sequence[int] = (3, 5)) -> dict:
    scores = model.scores(ds.test.patches, ds.test.globals, ds.text, graph)
    return evaluate(scores, ds.test.labels, ds.categories.n_seen, task, ks).to_dict()


def distillation_gap(model: Model, ds: Dataset) -> float:
    """Mean L1 distance between student and teacher global features on the test split."""
    G = model.student_global(ds.test.globals)
    return float(np.abs(G - ds.test.globals).sum(axis=1).mean())


@dataclass
class CellResult:
    zsl: dict
    gzsl: dict
    dist_gap: float
    final_loss: float


def run_cell(ds: Dataset, graph: Optional[RelationGraph], loss_cfg: LossConfig, isr_cfg: IsrConfig,
             mcfg: ModelConfig, tcfg: TrainConfig) -> CellResult:
    model = new_model(mcfg, isr_cfg, loss_cfg, tcfg.seed)
    logs = train(ds, graph, tcfg, model)
    return CellResult(evaluate_model(model, ds, graph, "zsl"), evaluate_model(model, ds, graph, "gzsl"),
                      distillation_gap(model, ds), logs[-1].total if logs else float("nan"))


def truth_graph(ds: Dataset, truth: Sequence[Sequence[int]], n_adj: int) -> RelationGraph:
    return graph_from_indices(ds.categories.names, ds.categories.n_seen, truth, n_adj)


def graph_for(source: str, ds: Dataset, n_adj: int, seed: int,
              truth: Optional[Sequence[Sequence[int]]] = None,
              given: Optional[RelationGraph] = None) -> RelationGraph:
    if source in ("random", "similarity"):
        return baseline_graph(source, ds.categories.names, ds.categories.n_seen, n_adj, seed, ds.text)
    if given is not None:
        return given
    if truth is None:
        raise ValueError(f"relation source {source!r} needs a ground-truth or mined graph")
    return truth_graph(ds, truth, n_adj)


# Rows of the module ablation grid: (dist, isr, ist)
TABLE2_ROWS = [(False, False, False), (True, False, False), (True, True, False),
               (True, False, True), (True, True, True)]
TABLE3_SOURCES = ["random", "similarity", "llm"]
ALPHAS = [0.0, 0.25, 0.5, 0.75, 1.0]


@dataclass
class Cell:
    label: str
    loss: LossConfig
    isr: IsrConfig
    source: str


def suite_cells(suite: str, base_loss: LossConfig, base_isr: IsrConfig) -> List[Cell]:
    if suite == "table2":
        return [Cell(f"dist={int(d)} isr={int(i)} ist={int(t)}",
                     replace(base_loss, enable_dist=d, enable_isr=i, enable_ist=t), base_isr, "llm")
                for d, i, t in TABLE2_ROWS]
    if suite == "table3":
        return [Cell(src, base_loss, base_isr, src) for src in TABLE3_SOURCES]
    if suite == "alpha":
        cells = []
        for a in ALPHAS:
            if a == 0.0:
                # zero mass means no local features at all
                cells.append(Cell("alpha=0.0", replace(base_loss, enable_isr=False), base_isr, "llm"))
            else:
                cells.append(Cell(f"alpha={a}", base_loss, replace(base_isr, mass_threshold=a), "llm"))
        return cells
    if suite == "lambda":
        return [Cell(f"lambda={lam}", replace(base_loss, lam=lam, enable_dist=lam > 0), base_isr, "llm")
                for lam in (0.0, 0.5)]
    raise ValueError(f"unknown suite {suite!r}")


def run_suite(suite: str, seeds: Sequence[int], synth: Optional[SyntheticConfig] = None,
              dataset: Optional[Dataset] = None, given_graph: Optional[RelationGraph] = None,
              base_loss: Optional[LossConfig] = None, base_isr: Optional[IsrConfig] = None,
              mcfg: Optional[ModelConfig] = None, tcfg: Optional[TrainConfig] = None,
              n_adj: int = 4, progress: Optional[Callable[[str], None]] = None) -> Dict[str, List[CellResult]]:
    """Run every cell of ``suite`` for every seed.

    With ``synth`` each seed draws its own synthetic dataset (ground-truth
    relations stand in for the mined graph); with ``dataset`` the data is
    fixed and only the training seed varies.
    """
    base_loss = base_loss or LossConfig()
    base_isr = base_isr or IsrConfig()
    tcfg = tcfg or TrainConfig()
    results: Dict[str, List[CellResult]] = {}
    for seed in seeds:
        truth = None
        if synth is not None:
            ds, truth, _ = generate_synthetic(replace(synth, seed=seed))
        elif dataset is not None:
            ds = dataset
        else:
            raise ValueError("need a synthetic config or a dataset")
        cfg = mcfg or ModelConfig(dim=ds.manifest.dim)
        for cell in suite_cells(suite, base_loss, base_isr):
            graph = graph_for(cell.source, ds, n_adj, seed, truth, given_graph)
            res = run_cell(ds, graph, cell.loss, cell.isr, cfg, replace(tcfg, seed=seed))
            results.setdefault(cell.label, []).append(res)
            if progress:
                progress(f"seed {seed} {cell.label}: zsl mAP {res.zsl['mAP']:.4f}")
    return results


def _mean_sd(xs: Sequence[float]) -> tuple:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def write_suite_csv(path, results: Dict[str, List[CellResult]], ks: Sequence[int] = (3, 5)) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["cell", "n"]
        for task in ("zsl", "gzsl"):
            header += [f"{task}_mAP_mean", f"{task}_mAP_sd"]
            for k in ks:
                header += [f"{task}_F1@{k}_mean", f"{task}_F1@{k}_sd"]
        header += ["dist_gap_mean", "dist_gap_sd"]
        w.writerow(header)
        for label, runs in results.items():
            row = [label, len(runs)]
            for task in ("zsl", "gzsl"):
                row += [f"{v:.6f}" for v in _mean_sd([getattr(r, task)["mAP"] for r in runs])]
                for k in ks:
                    row += [f"{v:.6f}" for v in _mean_sd([getattr(r, task)["perK"][str(k)]["F1"] for r in runs])]
            row += [f"{v:.6f}" for v in _mean_sd([r.dist_gap for r in runs])]
            w.writerow(row)
