"""
Module contains the ExperimentController class, which runs each command of the CLI.

Every command reads its inputs, computes, and writes its outputs atomically into the
configured output directory; inputs are never modified.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from src.scenlab.editing.editor import EditedSystem, sequential_edit
from src.scenlab.editing.experts import capture_fnn_input
from src.scenlab.editing.knowledge_base import KnowledgeBase, load_kb, save_kb
from src.scenlab.editing.records import EditSample, NegativeCache, ScenConfig
from src.scenlab.evaluation import checks
from src.scenlab.evaluation.dataset import FactDataset, build_edit_splits, gen_synthetic_facts, read_dataset, write_dataset
from src.scenlab.evaluation.metrics import MetricsReport, evaluate
from src.scenlab.evaluation.sweeps import (
    ActivationMatrix,
    SweepResult,
    activation_matrix,
    run_compression_sweep,
    run_layer_sweep,
    run_threshold_sweep,
)
from src.scenlab.exceptions import ConfigError, DatasetError
from src.scenlab.lm.checkpoint import load_checkpoint, save_checkpoint
from src.scenlab.lm.model import TransformerLM
from src.scenlab.lm.training import train_base
from src.utils.decorators import timer
from src.utils.files import atomic_write_text, dump_df, resolve_output_dir, write_json
from src.utils.settings import ExperimentConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.bin"
TRAINING_REPORT_FILE = "training_report.json"
DATASET_DIR = "dataset"
KB_FILE = "kb.bin"
EDIT_LOG_FILE = "edit_log.jsonl"
EDIT_SUMMARY_FILE = "edit_summary.json"
METRICS_FILE = "metrics_report.json"
METRICS_DETAIL_FILE = "metrics_detail.csv"
ACTIVATIONS_FILE = "activations.csv"
SWEEP_KINDS = ("threshold", "layer", "compression")

PathLike = Union[str, Path]


@dataclass
class EditSets:

    """What a mode edits and checks for locality."""

    edits: List[EditSample]
    loc: List[EditSample]
    passages: Optional[Dict[str, List[Tuple[str, str]]]] = None


class ExperimentController:

    """
    Runs training, editing, evaluation, sweeps and exports for one experiment config.

    :param config: the validated experiment.
    :param check: run the acceptance checks of ``config.assertions`` on the results.
    """

    def __init__(self, config: ExperimentConfig, check: bool = False):
        """Resolve the output directory."""
        self.config = config
        self.check = check
        self.output_dir = resolve_output_dir(config.output_dir)

    def _path(self, name: str) -> Path:
        return self.output_dir / name

    def _input(self, given: Optional[PathLike], default: str) -> Path:
        chosen = Path(given) if given is not None else self._path(default)
        if not chosen.exists():
            raise ConfigError(f"input {chosen} does not exist")
        return chosen

    @timer
    def train_base(self) -> Path:
        """
        Generate the dataset, train the base model on it and write checkpoint, report and dataset.

        :return: the checkpoint path.
        """
        cfg = self.config.dataset
        dataset = gen_synthetic_facts(cfg.seed, cfg.n_facts, cfg.n_rewrites, n_passages=cfg.n_passages, max_vocab=cfg.max_vocab)
        if dataset.max_length() - 1 > self.config.model.max_seq_len:
            raise ConfigError(f"dataset sequences need {dataset.max_length() - 1} positions, model.max_seq_len is {self.config.model.max_seq_len}")
        result = train_base(dataset.training_pairs(), self.config.model, self.config.training, tokenizer=dataset.tokenizer())
        write_dataset(self._path(DATASET_DIR), dataset)
        write_json(self._path(TRAINING_REPORT_FILE), result.report.to_dict() | {"config": self.config.to_dict()})
        return save_checkpoint(result.model, self._path(CHECKPOINT_FILE))

    def _load(self, checkpoint: Optional[PathLike], dataset: Optional[PathLike]) -> Tuple[TransformerLM, FactDataset]:
        model = load_checkpoint(self._input(checkpoint, CHECKPOINT_FILE))
        data = read_dataset(self._input(dataset, DATASET_DIR))
        for text in data.texts():
            if model.tokenizer.encode(text).has_unknown:
                raise DatasetError(f"dataset text {text!r} uses words outside the checkpoint vocabulary")
        return model, data

    def edit_sets(self, model: TransformerLM, data: FactDataset) -> EditSets:
        """
        Edit and locality sets of the configured mode.

        ``qa`` edits counterfactually relabeled facts; ``sequence`` edits the passages
        the base model learned wrongly and adds the perplexity suite.
        """
        cfg = self.config.dataset
        if self.config.mode == "qa":
            splits = build_edit_splits(model, data, cfg.n_edits, cfg.n_loc)
            return EditSets(edits=splits.edit, loc=splits.loc)
        splits = build_edit_splits(model, data, 0, cfg.n_loc)
        edited = data.passages_of("edited")
        passages = {
            "edited": [(p.prompt, p.corrected) for p in edited],
            "accurate": [(p.prompt, p.text) for p in data.passages_of("accurate")],
            "unrelated": [(p.prompt, p.text) for p in data.passages_of("unrelated")],
        }
        return EditSets(edits=[p.sample() for p in edited], loc=splits.loc, passages=passages)

    @timer
    def edit(self, checkpoint: Optional[PathLike] = None, dataset: Optional[PathLike] = None) -> Dict[str, int]:
        """
        Run the sequential edit and write the knowledge base, the log and a summary.

        :return: per-step success counts.
        """
        model, data = self._load(checkpoint, dataset)
        sets = self.edit_sets(model, data)
        run = sequential_edit(model, sets.edits, self.config.scen)
        save_kb(self._path(KB_FILE), KnowledgeBase.from_run(run, model, self.config.scen.neuron_input))
        atomic_write_text(self._path(EDIT_LOG_FILE), run.log.to_jsonl())
        summary = run.log.success_counts()
        write_json(self._path(EDIT_SUMMARY_FILE), summary)
        return summary

    def _system(self, checkpoint, kb, dataset) -> Tuple[EditedSystem, EditSets, ScenConfig]:
        model, data = self._load(checkpoint, dataset)
        knowledge = load_kb(self._input(kb, KB_FILE), model=model, allow_empty=True)
        scen = replace(self.config.scen, layer=knowledge.bank.layer, theta=knowledge.bank.theta, neuron_input=knowledge.neuron_input)
        sets = self.edit_sets(model, data)
        by_id = {sample.id: sample for sample in sets.edits}
        members = [member for expert in knowledge.experts for member in expert.member_ids]
        missing = [member for member in members if member not in by_id]
        if missing:
            raise DatasetError(f"knowledge base edits {missing[:5]} are not in the {self.config.mode} edit set of this dataset")
        sets.edits = [by_id[member] for member in members]
        if sets.passages is not None:
            sets.passages["edited"] = [(s.prompt, s.target) for s in sets.edits]
        return EditedSystem(model, knowledge.bank, knowledge.experts, scen), sets, scen

    @timer
    def evaluate(self, checkpoint: Optional[PathLike] = None, kb: Optional[PathLike] = None, dataset: Optional[PathLike] = None) -> MetricsReport:
        """Score the edited system and write the report and per-query detail."""
        system, sets, _ = self._system(checkpoint, kb, dataset)
        report = evaluate(system, sets.edits, sets.loc, passages=sets.passages, config=self.config.to_dict())
        write_json(self._path(METRICS_FILE), report.summary())
        dump_df(self._path(METRICS_DETAIL_FILE), report.details_frame())
        if self.check:
            checks.raise_on_failures(checks.check_report(report, self.config.assertions))
        return report

    @timer
    def sweep(self, kind: str, checkpoint: Optional[PathLike] = None, kb: Optional[PathLike] = None, dataset: Optional[PathLike] = None) -> SweepResult:
        """
        Run one sweep and write its JSON report and CSV curve.

        ``threshold`` reuses the stored knowledge base; ``layer`` and ``compression``
        repeat the sequential edit from the base checkpoint.
        """
        if kind not in SWEEP_KINDS:
            raise ConfigError(f"unknown sweep {kind!r}; expected one of {SWEEP_KINDS}")
        sweeps = self.config.sweeps
        bounds = self.config.assertions
        if kind == "threshold":
            system, sets, _ = self._system(checkpoint, kb, dataset)
            result = run_threshold_sweep(system, sets.edits, sets.loc, grid=sweeps.thresholds)
            failures = checks.check_threshold_sweep(result, bounds)
        else:
            model, data = self._load(checkpoint, dataset)
            sets = self.edit_sets(model, data)
            if kind == "layer":
                result = run_layer_sweep(model, sets.edits, sets.loc, self.config.scen, layers=sweeps.layers)
                failures = checks.check_layer_sweep(result, bounds)
            else:
                result = run_compression_sweep(model, sets.edits, sets.loc, self.config.scen, group_sizes=sweeps.group_sizes)
                failures = checks.check_compression_sweep(result, len(sets.edits), bounds)
                for k, matrix in zip(result.points, result.matrices):
                    dump_df(self._path(f"activations_k{k}.csv"), matrix.to_frame(), index=True)
        write_json(self._path(f"sweep_{kind}.json"), result.to_dict())
        dump_df(self._path(f"sweep_{kind}.csv"), result.to_frame())
        if self.check:
            checks.raise_on_failures(failures)
        return result

    def export_activations(self, checkpoint: Optional[PathLike] = None, kb: Optional[PathLike] = None, dataset: Optional[PathLike] = None) -> ActivationMatrix:
        """Write the neuron-by-sample activation matrix of the stored edits as CSV."""
        system, sets, scen = self._system(checkpoint, kb, dataset)
        matrix = activation_matrix(system.bank, edit_cache(system.model, sets.edits, scen))
        dump_df(self._path(ACTIVATIONS_FILE), matrix.to_frame(), index=True)
        if self.check:
            group_size = max((len(e.member_ids) for e in system.experts), default=1)
            checks.raise_on_failures(checks.check_activation_matrix(matrix, group_size, self.config.assertions))
        return matrix


def edit_cache(model: TransformerLM, samples: Sequence[EditSample], scen: ScenConfig) -> NegativeCache:
    """FNN vectors of ``samples`` as the editing run cached them."""
    cache = NegativeCache(width=model.fnn_width)
    for sample in samples:
        cache.append(sample.id, capture_fnn_input(model, model.tokenizer.prompt_ids(sample.prompt), scen.layer, scen.neuron_input))
    return cache


def summary_text(summary: Dict) -> str:
    """Structured one-line rendering of a summary dict."""
    return json.dumps(summary, sort_keys=True)
