"""Experiment harness: declarative plans over training recipes and decode
modes, persisted artifacts with content hashes, and directional comparison
of result-grid cells."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import am, corpus as corpus_mod, ctc, ngram, sst, unsup, wfst
from .corpus import SynthSpec

log = logging.getLogger(__name__)

RECIPE_KINDS = ("supervised", "sst", "unsup", "unsup_then_sst")


@dataclass
class RecipeSpec:
    label: str
    kind: str
    initial: str = "supervised"  # role used by sst recipes
    transcribe_mode: str = "greedy"
    iterations: int = 1
    modes: tuple = ("greedy",)

    def normalized(self) -> "RecipeSpec":
        if self.kind == "unsup_then_sst":
            return dataclasses.replace(self, kind="sst", initial="unsup")
        return self


@dataclass
class ExperimentPlan:
    out_dir: str
    corpus: dict = field(default_factory=dict)  # {"synth": {...}} or {"path": dir}
    recipes: list = field(default_factory=list)
    seeds: dict = field(default_factory=lambda: dict(DEFAULT_SEEDS))
    lm_order: int = 3
    k: int = 32
    arch: dict = field(default_factory=lambda: {"context": 2, "dim_hidden": 32})
    train: dict = field(default_factory=lambda: {"lr": 0.3, "batch_size": 8, "epochs": 15})
    pretrain: dict = field(
        default_factory=lambda: {"epochs": 10, "mask_prob": 0.08, "mask_span": 4}
    )
    decode: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)

    def validate(self) -> None:
        if not self.recipes:
            raise ValueError("plan has no recipes")
        seen = set()
        for r in self.recipes:
            if r.label in seen:
                raise ValueError(f"duplicate recipe label {r.label!r}")
            seen.add(r.label)
            if r.kind not in RECIPE_KINDS:
                raise ValueError(f"unknown recipe kind {r.kind!r}")
            if r.iterations < 1:
                raise ValueError("recipe iterations must be >= 1")
        for key in ("corpus", "model", "train", "kmeans", "head"):
            if key not in self.seeds:
                raise ValueError(f"missing seed {key!r} (all randomness must be seeded)")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["recipes"] = [dataclasses.asdict(r) | {"modes": list(r.modes)} for r in self.recipes]
        return d

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentPlan":
        data = dict(data)
        recipes = []
        for r in data.pop("recipes", []):
            r = dict(r)
            r["modes"] = tuple(r.get("modes", ("greedy",)))
            recipes.append(RecipeSpec(**r))
        plan = cls(recipes=recipes, **data)
        return plan


DEFAULT_SEEDS = {"corpus": 7, "model": 11, "train": 13, "kmeans": 17, "head": 19}


def default_plan(out_dir, corpus_spec: SynthSpec | None = None) -> ExperimentPlan:
    """The pinned default experiment: the four training recipes decoded
    without external LM data, plus the transcription-mode comparison under
    fusion and graph decoding."""
    spec = corpus_spec if corpus_spec is not None else SynthSpec()
    plan = ExperimentPlan(
        out_dir=str(out_dir),
        corpus={"synth": dataclasses.asdict(spec)},
        recipes=[
            RecipeSpec("supervised", "supervised", modes=("greedy", "ctc-wfst", "fusion")),
            RecipeSpec("sst", "sst", initial="supervised", transcribe_mode="greedy"),
            RecipeSpec("unsup", "unsup"),
            RecipeSpec("unsup_sst", "sst", initial="unsup", transcribe_mode="greedy"),
            RecipeSpec(
                "sst_fusion", "sst", initial="supervised", transcribe_mode="fusion",
                modes=("fusion", "ctc-wfst"),
            ),
            RecipeSpec(
                "sst_ctcwfst", "sst", initial="supervised", transcribe_mode="ctc-wfst",
                modes=("fusion", "ctc-wfst"),
            ),
        ],
        assertions=default_assertions(),
    )
    plan.seeds["corpus"] = spec.seed
    return plan


def default_assertions() -> list:
    """Directional claims mirroring the comparison grid's expected pattern."""
    return [
        {"name": "domain_shift", "a": ["supervised", "greedy", "A"],
         "b": ["supervised", "greedy", "B"], "margin": 0.0},
        {"name": "sst_helps_domain_b", "a": ["sst", "greedy", "B"],
         "b": ["supervised", "greedy", "B"], "margin": 0.02},
        {"name": "combo_at_least_sst", "a": ["unsup_sst", "greedy", "B"],
         "b": ["sst", "greedy", "B"], "margin": -0.005},
        {"name": "combo_at_least_unsup", "a": ["unsup_sst", "greedy", "B"],
         "b": ["unsup", "greedy", "B"], "margin": -0.005},
        {"name": "graph_decode_helps_b", "a": ["supervised", "ctc-wfst", "B"],
         "b": ["supervised", "greedy", "B"], "margin": 0.0},
        {"name": "graph_transcription_helps", "a": ["sst_ctcwfst", "fusion", "B"],
         "b": ["sst_fusion", "fusion", "B"], "margin": -1e-9},
    ]


@dataclass
class ResultGrid:
    cells: dict  # label -> mode -> domain -> {"wer": ...} | {"failed": reason}
    meta: dict

    def wer(self, label, mode, domain):
        cell = self.cells.get(label, {}).get(mode, {}).get(domain)
        if cell is None or "wer" not in cell:
            return None
        return cell["wer"]


def compare(grid: ResultGrid, assertions) -> dict:
    """Evaluate directional claims WER(a) < WER(b) - margin against a grid."""
    results = []
    for claim in assertions:
        wa = grid.wer(*claim["a"])
        wb = grid.wer(*claim["b"])
        if wa is None or wb is None:
            status = "not-evaluable"
        else:
            status = "pass" if wa < wb - claim.get("margin", 0.0) else "fail"
        results.append(
            {"name": claim.get("name", "claim"), "status": status, "wer_a": wa, "wer_b": wb,
             "margin": claim.get("margin", 0.0)}
        )
    passed = sum(1 for r in results if r["status"] == "pass")
    return {"claims": results, "passed": passed, "total": len(results)}


def hash_tree(root: Path, exclude=("hashes.json",)) -> dict:
    """sha256 of every file under root, keyed by sorted relative path."""
    root = Path(root)
    hashes = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(root).as_posix()
        if rel in exclude:
            continue
        hashes[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
    return hashes


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


class _PlanRunner:
    """Executes one plan; shared stages are built lazily and failures are
    confined to the grid cells that need the failing stage."""

    def __init__(self, plan: ExperimentPlan):
        self.plan = plan
        self.out = Path(plan.out_dir)
        self.cache: dict = {}
        self.durations: dict = {}

    def stage(self, name, builder):
        if name not in self.cache:
            t0 = time.monotonic()
            try:
                self.cache[name] = ("ok", builder())
            except Exception as e:  # failure is data: cells consume it
                log.warning("[%s] stage failed: %s", name, e)
                self.cache[name] = ("failed", f"{name}: {e}")
            self.durations[name] = time.monotonic() - t0
        status, value = self.cache[name]
        if status == "failed":
            raise StageFailed(value)
        return value

    # -- shared stages ----------------------------------------------------
    def corpus(self):
        def build():
            cfg = self.plan.corpus
            if "path" in cfg:
                return corpus_mod.load_corpus(cfg["path"])
            spec = SynthSpec(**cfg.get("synth", {}))
            return corpus_mod.synthesize_corpus(spec, self.out / "corpus")

        return self.stage("corpus", build)

    def inventory(self):
        return tuple(self.corpus().lexicon.inventory)

    def tokens(self):
        return ctc.grid_tokens(self.inventory())

    def word_lm(self):
        def build():
            lm = ngram.train_lm(self.corpus().text, self.plan.lm_order)
            ngram.write_arpa(lm, self._ensure_dir("lm") / "word.arpa")
            return lm

        return self.stage("word_lm", build)

    def char_lm(self):
        def build():
            bundle = self.corpus()
            sentences = [bundle.lexicon.spell(s) for s in bundle.text]
            lm = ngram.train_lm(sentences, self.plan.lm_order)
            ngram.write_arpa(lm, self._ensure_dir("lm") / "char.arpa")
            return lm

        return self.stage("char_lm", build)

    def graph(self):
        def build():
            bundle = self.corpus()
            t_fst = wfst.build_token_fst(self.inventory())
            l_fst = wfst.build_lexicon_fst(bundle.lexicon)
            g_fst = wfst.build_grammar_fst(self.word_lm(), bundle.lexicon.words)
            tlg = wfst.build_tlg(t_fst, l_fst, g_fst)
            gdir = self._ensure_dir("graph")
            for name, fst in (("tokens", t_fst), ("lexicon", l_fst), ("grammar", g_fst), ("tlg", tlg)):
                wfst.save_fst(fst, gdir / name)
            return tlg

        return self.stage("graph", build)

    def scorer(self):
        return self.stage(
            "scorer", lambda: ngram.char_lm_scorer(self.char_lm(), self.inventory())
        )

    def decode_params(self, mode: str) -> sst.DecodeParams:
        params = sst.DecodeParams(lexicon=self.corpus().lexicon, **self.plan.decode)
        if mode == "ctc-wfst":
            params.graph = self.graph()
        if mode == "fusion":
            params.scorer = self.scorer()
        return params

    def train_config(self, seed_shift=0, **overrides) -> am.TrainConfig:
        cfg = dict(self.plan.train)
        cfg.update(overrides)
        cfg.setdefault("seed", self.plan.seeds["train"] + seed_shift)
        return am.TrainConfig(**cfg)

    # -- model roles -------------------------------------------------------
    def model(self, role: str) -> am.RefModel:
        if role == "supervised":
            return self.stage("model:supervised", self._train_supervised)
        if role == "unsup":
            return self.stage("model:unsup", self._train_unsup)
        raise ValueError(f"unknown model role {role!r}")

    def _train_supervised(self):
        bundle = self.corpus()
        tokens = self.tokens()
        dataset = sst.ctc_dataset(bundle.supervised, bundle.lexicon)
        dim_in = dataset[0][0].shape[1]
        model = am.RefModel.create(
            self.plan.arch["context"], dim_in, self.plan.arch["dim_hidden"],
            len(tokens), self.plan.seeds["model"], tokens,
        )
        am.train_ctc(model, dataset, self.train_config())
        am.save_model(model, self._ensure_dir("models") / "supervised.am")
        return model

    def _train_unsup(self):
        bundle = self.corpus()
        tokens = self.tokens()
        base = self.model("supervised")
        pcfg = self.plan.pretrain
        mask = am.InputMaskConfig(mask_prob=pcfg["mask_prob"], span=pcfg["mask_span"])
        arch = unsup.ArchConfig(
            context=self.plan.arch["context"], dim_hidden=self.plan.arch["dim_hidden"],
            seed=self.plan.seeds["model"] + 1,
        )
        unsup_iters = [r.iterations for r in self.plan.recipes if r.normalized().kind == "unsup"]
        iterations = max(unsup_iters) if unsup_iters else 1
        prev = base
        itr = None
        mdir = self._ensure_dir("models")
        for i in range(1, iterations + 1):
            itr = unsup.unsup_iteration(
                prev, bundle.untranscribed, self.plan.k, arch, mask,
                self.train_config(seed_shift=10 + i, epochs=pcfg["epochs"]),
                kmeans_seed=self.plan.seeds["kmeans"] + i,
            )
            unsup.save_centroids(itr.kmeans, mdir / f"kmeans_iter{i}.bin")
            unsup.save_targets(itr.targets, mdir / f"targets_iter{i}.jsonl")
            am.save_model(itr.model, mdir / f"pretrained_iter{i}.am")
            prev = itr.model
        model = am.swap_head(itr.model, len(tokens), self.plan.seeds["head"], tokens)
        am.train_ctc(
            model, sst.ctc_dataset(bundle.supervised, bundle.lexicon), self.train_config(seed_shift=2)
        )
        am.save_model(model, mdir / "unsup.am")
        return model

    def recipe_model(self, recipe: RecipeSpec) -> am.RefModel:
        recipe = recipe.normalized()
        if recipe.kind == "supervised":
            return self.model("supervised")
        if recipe.kind == "unsup":
            return self.model("unsup")
        # sst
        def build():
            bundle = self.corpus()
            initial = self.model(recipe.initial)
            params = self.decode_params(recipe.transcribe_mode)
            cfg = sst.SstConfig(
                mode=recipe.transcribe_mode,
                iterations=recipe.iterations,
                train=self.train_config(seed_shift=20),
                head_seed=self.plan.seeds["head"] + 100,
            )
            run = sst.run_sst(initial, bundle.supervised, bundle.untranscribed, cfg, params)
            if not run.models:
                raise RuntimeError(run.report.get("aborted", "self-training produced no model"))
            pdir = self._ensure_dir("pseudo")
            for i, kept in enumerate(run.pseudo, 1):
                sst.save_pseudo(kept, pdir / f"{recipe.label}_iter{i}.jsonl")
            _write_json(pdir / f"{recipe.label}_report.json", run.report)
            model = run.models[-1]
            am.save_model(model, self._ensure_dir("models") / f"{recipe.label}.am")
            return model

        return self.stage(f"model:{recipe.label}", build)

    def _ensure_dir(self, name) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- main --------------------------------------------------------------
    def run(self) -> ResultGrid:
        plan = self.plan
        plan.validate()
        self.out.mkdir(parents=True, exist_ok=True)
        _write_json(self.out / "plan.json", plan.to_json())

        # Without a corpus there is no grid at all; everything downstream
        # fails per-cell instead.
        domains = sorted(self.corpus().tests.keys())

        cells: dict = {}
        for recipe in plan.recipes:
            label = recipe.label
            cells[label] = {}
            try:
                model = self.recipe_model(recipe)
                recipe_err = None
            except StageFailed as e:
                model = None
                recipe_err = str(e)
            for mode in recipe.modes:
                cells[label][mode] = {}
                for domain in domains:
                    t0 = time.monotonic()
                    try:
                        if recipe_err is not None:
                            raise StageFailed(recipe_err)
                        wer = self._eval_cell(model, mode, domain)
                        cells[label][mode][domain] = {"wer": wer}
                        log.info("[%s/%s/%s] wer=%.4f", label, mode, domain, wer)
                    except Exception as e:
                        cells[label][mode][domain] = {"failed": str(e)}
                        log.warning("[%s/%s/%s] failed: %s", label, mode, domain, e)
                    self.durations[f"{label}/{mode}/{domain}"] = time.monotonic() - t0

        grid = ResultGrid(cells=cells, meta={"seeds": dict(plan.seeds), "durations": self.durations})
        persisted_meta = {"seeds": dict(plan.seeds)}  # durations stay in memory
        _write_json(self.out / "results" / "grid.json", {"cells": cells, "meta": persisted_meta})
        if plan.assertions:
            _write_json(self.out / "results" / "compare.json", compare(grid, plan.assertions))
        _write_json(self.out / "hashes.json", hash_tree(self.out))
        return grid

    def _eval_cell(self, model, mode, domain) -> float:
        bundle = self.corpus()
        params = self.decode_params(mode)
        wer = sst.evaluate_wer(model, {domain: bundle.tests[domain]}, mode, params)
        return wer.per_domain[domain]


class StageFailed(RuntimeError):
    pass


def run_plan(plan: ExperimentPlan) -> ResultGrid:
    """Execute a plan: train the recipes, decode every planned cell, persist
    all artifacts under the plan's output directory with content hashes."""
    return _PlanRunner(plan).run()
