#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Pipeline stages

Every stage reads its inputs from and writes its outputs to one run directory. The
manifest records per stage the config fingerprint, the checksums of the inputs, the
outputs and the seeds, so a stage whose record is still valid is skipped.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-10"


import hashlib
import json
import logging
import os
import types
from contextlib import contextmanager
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .align import align
from .config import fingerprint, save_config
from .datasets import collect, fit_norm, load, load_stats, read_header, save, save_stats
from .diffusion import DiffusionPlanner, init_denoiser, train_bc
from .errors import ArtifactError, PrerequisiteError, RunLockedError
from .evalharness import ablation_suite, disturbance_sweep, read_csv, reports_frame, trace_frame
from .evalharness import write_csv
from .gaitsim import ExpertPolicy
from .ndcore import load_checkpoint, save_checkpoint
from .plot import StabilityPlot, TracePlot
from .preference import LABEL_MODES, build_index, build_preference_dataset, label_agreement
from .preference import load_pairs, save_pairs, select_optimal_expert


logger = logging.getLogger(__name__)

STAGES = ("gen-expert", "train-bc", "rollout", "label", "align", "eval", "ablate", "report")
MANIFEST = "manifest.json"
LOCKFILE = ".lock"


def stage_seed(seed, *keys):
    """32-bit seed of a random stream derived from the run seed and string keys"""
    text = json.dumps([seed, *keys], separators=(",", ":"))
    return int(hashlib.sha256(text.encode()).hexdigest()[:8], 16)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def artifact_fingerprint(path):
    """Config fingerprint embedded in an artifact file

    Raises:
        ArtifactError: if the file carries no readable fingerprint
    """
    path = Path(path)
    if path.suffix == ".jsonl":
        return read_header(path).get("fingerprint")
    if path.suffix == ".csv":
        return read_csv(path)[1]
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{path}: not valid JSON: {e}") from e
        return doc.get("fingerprint", doc.get("meta", {}).get("fingerprint"))
    raise ArtifactError(f"{path}: unknown artifact type")


def speed_tag(v_cmd):
    return f"{v_cmd:g}"


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


class RunDirectory:
    """Artifacts, manifest and lock of one run

    Args:
        path (str | Path): Run directory, created on demand
    """

    def __init__(self, path):
        self.path = Path(path)

    def file(self, name):
        return self.path / name

    def exists(self, name):
        return self.file(name).is_file()

    @contextmanager
    def lock(self):
        """Hold the single-writer lock of the run directory

        Raises:
            RunLockedError: if another process holds the lock
        """
        self.path.mkdir(parents=True, exist_ok=True)
        lockfile = self.file(LOCKFILE)
        try:
            fd = os.open(lockfile, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise RunLockedError(
                f"Run directory {self.path} is locked by another process "
                f"(remove {lockfile} if no stage is running)"
            ) from e
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lockfile.unlink(missing_ok=True)

    def manifest(self):
        if not self.exists(MANIFEST):
            return dict(stages={})
        try:
            return json.loads(self.file(MANIFEST).read_text())
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{self.file(MANIFEST)}: not valid JSON: {e}") from e

    def record(self, stage, fingerprint, inputs, outputs, seeds):
        """Store the manifest entry of a finished stage"""
        manifest = self.manifest()
        manifest["stages"][stage] = dict(
            fingerprint=fingerprint,
            inputs={name: file_digest(self.file(name)) for name in inputs},
            outputs=sorted(outputs),
            seeds=seeds,
        )
        write_json(self.file(MANIFEST), manifest)

    def is_cached(self, stage, fingerprint, inputs):
        """Whether the recorded run of a stage is still valid

        Valid means same fingerprint, unchanged inputs and all outputs present.
        """
        entry = self.manifest()["stages"].get(stage)
        if entry is None or entry["fingerprint"] != fingerprint:
            return False
        if set(entry["inputs"]) != set(inputs):
            return False
        if any(file_digest(self.file(n)) != d for n, d in entry["inputs"].items()):
            return False
        return all(self.exists(name) for name in entry["outputs"])

    def require(self, name, stage):
        """Path of an upstream artifact

        Raises:
            PrerequisiteError: naming the stage to run if the artifact is missing
        """
        if not self.exists(name):
            raise PrerequisiteError(self.file(name), stage)
        return self.file(name)


class Pipeline:
    """Runs the stages of a configured experiment

    Args:
        cfg (RunConfig): Run configuration
        force (bool): Rerun stages even if their outputs are up to date
        progress (bool): Show progress bars
    """

    def __init__(self, cfg, *, force=False, progress=True):
        self.cfg = cfg
        self.fingerprint = fingerprint(cfg)
        self.run = RunDirectory(cfg.run_path())
        self.force = force
        self.progress = progress

    ## Artifact names

    def _split(self, total):
        """Episodes per commanded speed, the remainder goes to the first speeds"""
        n = len(self.cfg.v_cmds)
        return [total // n + (i < total % n) for i in range(n)]

    def inputs(self, stage):
        """Input artifacts of a stage as (name, producing stage, required)"""
        gaits = self.cfg.gaits
        stats = [("norm_stats.json", "gen-expert", True)]
        expert = [(f"{g}_expert.jsonl", "gen-expert", True) for g in gaits]
        bc = [(f"bc_{g}.json", "train-bc", True) for g in gaits]
        planner = [(f"{g}_planner.jsonl", "rollout", True) for g in gaits]
        if stage == "gen-expert":
            return []
        if stage == "train-bc":
            return expert + stats
        if stage == "rollout":
            return bc + stats
        if stage == "label":
            return planner + expert + stats
        if stage == "align":
            mode = self.cfg.preference.mode
            pairs = [(f"{g}_pairs_{mode}.jsonl", "label", True) for g in gaits]
            return pairs + planner + bc + stats
        if stage == "eval":
            aligned = [(f"aligned_{g}.json", "align", False) for g in gaits]
            return bc + stats + aligned
        if stage == "ablate":
            return planner + expert + bc + stats
        if stage == "report":
            return [(name, "eval", True) for name in self._eval_tables()] + [
                ("ablation.csv", "ablate", False),
                ("label_agreement.json", "label", False),
            ]
        raise ValueError(f"Unknown stage `{stage}`, expected one of {STAGES}")

    def _eval_tables(self):
        return [
            f"eval_{g}_{speed_tag(v)}.csv" for g in self.cfg.gaits for v in self.cfg.v_cmds
        ]

    def _check_inputs(self, stage):
        present = []
        for name, producer, required in self.inputs(stage):
            if not required and not self.run.exists(name):
                continue
            path = self.run.require(name, producer)
            found = artifact_fingerprint(path)
            if found != self.fingerprint:
                raise ArtifactError(
                    f"{path} was produced with config fingerprint {found}, the current "
                    f"configuration has {self.fingerprint}. Rerun `prefdiff {producer}` "
                    f"or use another run directory."
                )
            present.append(name)
        return present

    ## Driver

    def run_stage(self, stage):
        """Run one stage unless its outputs are up to date

        Returns:
            list[str]: Names of the output artifacts

        Raises:
            PrerequisiteError: if an upstream artifact is missing
            ArtifactError: if an upstream artifact is corrupt or of another configuration
            RunLockedError: if another process writes to the run directory
        """
        if stage not in STAGES:
            raise ValueError(f"Unknown stage `{stage}`, expected one of {STAGES}")
        with self.run.lock():
            inputs = self._check_inputs(stage)
            if not self.force and self.run.is_cached(stage, self.fingerprint, inputs):
                logger.info("Stage %s is up to date in %s, skipping", stage, self.run.path)
                return self.run.manifest()["stages"][stage]["outputs"]
            logger.info("Stage %s started in %s", stage, self.run.path)
            save_config(self.cfg, self.run.file("config.json"))
            method = getattr(self, "_" + stage.replace("-", "_"))
            outputs, seeds = method()
            self.run.record(stage, self.fingerprint, inputs, outputs, seeds)
            logger.info("Stage %s finished: %s", stage, ", ".join(outputs))
            return outputs

    ## Loaders

    def _stats(self):
        return load_stats(self.run.file("norm_stats.json"))

    def _net(self, name):
        net, _ = load_checkpoint(self.run.file(name))
        return net

    def _trajs(self, name):
        return load(self.run.file(name))

    def _index(self, gait):
        expert = self._trajs(f"{gait}_expert.jsonl")
        return build_index(select_optimal_expert(expert), self._stats())

    ## Stages

    def _gen_expert(self):
        cfg, outputs, seeds = self.cfg, [], {}
        all_trajs = []
        for g in cfg.gaits:
            trajs = []
            for v, n in zip(cfg.v_cmds, self._split(cfg.dataset.expert_episodes)):
                if n == 0:
                    continue
                seeds[f"{g}_{speed_tag(v)}"] = seed = stage_seed(cfg.seed, "gen-expert", g, v)
                trajs += collect(
                    "expert",
                    g,
                    v,
                    n,
                    cfg.dataset.max_steps,
                    seed,
                    env=cfg.env,
                    workers=cfg.dataset.workers,
                )
            save(trajs, self.run.file(f"{g}_expert.jsonl"), self.fingerprint)
            outputs.append(f"{g}_expert.jsonl")
            all_trajs += trajs
        save_stats(fit_norm(all_trajs), self.run.file("norm_stats.json"), self.fingerprint)
        outputs.append("norm_stats.json")
        return outputs, seeds

    def _train_bc(self):
        cfg, outputs, seeds = self.cfg, [], {}
        stats = self._stats()
        for g in cfg.gaits:
            seeds[g] = stage_seed(cfg.seed, "train-bc", g)
            net, log = train_bc(
                self._trajs(f"{g}_expert.jsonl"),
                stats,
                cfg.diffusion,
                np.random.default_rng(seeds[g]),
                progress=self.progress,
            )
            meta = dict(fingerprint=self.fingerprint, gait=g, stage="train-bc")
            save_checkpoint(net, self.run.file(f"bc_{g}.json"), meta)
            write_json(
                self.run.file(f"bc_{g}_log.json"), dict(fingerprint=self.fingerprint, log=log)
            )
            outputs += [f"bc_{g}.json", f"bc_{g}_log.json"]
        return outputs, seeds

    def _rollout(self):
        cfg, outputs, seeds = self.cfg, [], {}
        stats = self._stats()
        for g in cfg.gaits:
            planner = DiffusionPlanner(
                self._net(f"bc_{g}.json"), stats, cfg.diffusion, cfg.env, source="bc"
            )
            trajs = []
            for v, n in zip(cfg.v_cmds, self._split(cfg.dataset.planner_episodes)):
                if n == 0:
                    continue
                seeds[f"{g}_{speed_tag(v)}"] = seed = stage_seed(cfg.seed, "rollout", g, v)
                trajs += collect(
                    planner,
                    g,
                    v,
                    n,
                    cfg.dataset.max_steps,
                    seed,
                    env=cfg.env,
                    workers=cfg.dataset.workers,
                )
            save(trajs, self.run.file(f"{g}_planner.jsonl"), self.fingerprint)
            outputs.append(f"{g}_planner.jsonl")
        return outputs, seeds

    def _label(self):
        cfg, outputs, seeds = self.cfg, [], {}
        agreement = {}
        for g in cfg.gaits:
            planner_trajs = self._trajs(f"{g}_planner.jsonl")
            index = self._index(g)
            pairs_by_mode = {}
            for mode in LABEL_MODES:
                seeds[f"{g}_{mode}"] = stage_seed(cfg.seed, "label", g, mode)
                pairs_by_mode[mode] = build_preference_dataset(
                    planner_trajs,
                    index,
                    cfg.preference.pairs,
                    cfg.diffusion.horizon,
                    mode,
                    np.random.default_rng(seeds[f"{g}_{mode}"]),
                    beta=cfg.preference.beta,
                )
                name = f"{g}_pairs_{mode}.jsonl"
                save_pairs(pairs_by_mode[mode], self.run.file(name), self.fingerprint)
                outputs.append(name)
            seeds[f"{g}_agreement"] = stage_seed(cfg.seed, "label", g, "agreement")
            agreement[g] = label_agreement(
                pairs_by_mode["weak"], np.random.default_rng(seeds[f"{g}_agreement"])
            )
            logger.info(
                "Weak labels of %s agree with reward labels on %.1f %%", g, 100 * agreement[g]
            )
        write_json(
            self.run.file("label_agreement.json"),
            dict(fingerprint=self.fingerprint, agreement=agreement),
        )
        outputs.append("label_agreement.json")
        return outputs, seeds

    def _align(self):
        cfg, outputs, seeds = self.cfg, [], {}
        stats = self._stats()
        mode = cfg.preference.mode
        for g in cfg.gaits:
            pairs = load_pairs(
                self.run.file(f"{g}_pairs_{mode}.jsonl"), self._trajs(f"{g}_planner.jsonl")
            )
            seeds[g] = stage_seed(cfg.seed, "align", g)
            aligned, log = align(
                self._net(f"bc_{g}.json"),
                pairs,
                cfg.align,
                np.random.default_rng(seeds[g]),
                stats=stats,
                diffusion_cfg=cfg.diffusion,
                progress=self.progress,
            )
            meta = dict(fingerprint=self.fingerprint, gait=g, stage="align", mode=mode)
            save_checkpoint(aligned, self.run.file(f"aligned_{g}.json"), meta)
            write_json(
                self.run.file(f"align_{g}_log.json"), dict(fingerprint=self.fingerprint, log=log)
            )
            outputs += [f"aligned_{g}.json", f"align_{g}_log.json"]
        return outputs, seeds

    def _policies(self, gait, stats):
        """Policies of the configured planner kinds available for a gait"""
        cfg = self.cfg
        policies = {}
        for kind in cfg.eval.planners:
            if kind == "expert":
                policies[kind] = ExpertPolicy(gait, cfg.env)
                continue
            if kind == "untrained":
                rng = np.random.default_rng(stage_seed(cfg.seed, "untrained", gait))
                net = init_denoiser(cfg.diffusion, rng)
            elif kind == "bc":
                net = self._net(f"bc_{gait}.json")
            elif self.run.exists(f"aligned_{gait}.json"):
                net = self._net(f"aligned_{gait}.json")
            else:
                logger.info("No aligned planner for %s, run `prefdiff align` to include it", gait)
                continue
            policies[kind] = DiffusionPlanner(net, stats, cfg.diffusion, cfg.env, source=kind)
        return policies

    def _eval(self):
        cfg, ec, outputs = self.cfg, self.cfg.eval, []
        stats = self._stats()
        trace_at = ec.disturbance if ec.disturbance in ec.disturbances else ec.disturbances[0]
        for g in cfg.gaits:
            policies = self._policies(g, stats)
            for v in cfg.v_cmds:
                tag = f"{g}_{speed_tag(v)}"
                reports = []
                for kind, policy in policies.items():
                    sweep = disturbance_sweep(
                        policy,
                        g,
                        v,
                        ec.episodes,
                        ec.seeds,
                        ec.disturbances,
                        env=cfg.env,
                        workers=ec.workers,
                        fingerprint=self.fingerprint,
                    )
                    for report in sweep:
                        logger.info(
                            "%s %s at δ=%g: stability %.1f %%, velocity %.3f m/s",
                            kind,
                            tag,
                            report.disturbance,
                            report.stability_mean,
                            report.velocity_mean,
                        )
                        if report.disturbance == trace_at:
                            outputs += self._write_traces(report, f"{tag}_{kind}")
                    reports += sweep
                table = reports_frame(reports)
                write_csv(table, self.run.file(f"eval_{tag}.csv"), self.fingerprint)
                write_json(
                    self.run.file(f"eval_{tag}.json"),
                    dict(fingerprint=self.fingerprint, reports=[r.to_dict() for r in reports]),
                )
                outputs += [f"eval_{tag}.csv", f"eval_{tag}.json"]
        return outputs, dict(eval=list(ec.seeds))

    def _write_traces(self, report, prefix):
        names = []
        first_seed = report.seeds[0]
        for n, traj in enumerate(report.trajectories[first_seed][: self.cfg.eval.trace_episodes]):
            name = f"trace_{prefix}_{n}.csv"
            trace = trace_frame(traj, self.cfg.eval.trace_window)
            write_csv(trace, self.run.file(name), self.fingerprint)
            names.append(name)
        return names

    def _ablate(self):
        cfg, tables, seeds = self.cfg, [], {}
        stats = self._stats()
        for g in cfg.gaits:
            net = self._net(f"bc_{g}.json")
            planner_trajs = self._trajs(f"{g}_planner.jsonl")
            index = self._index(g)
            for v in cfg.v_cmds:
                seeds[f"{g}_{speed_tag(v)}"] = seed = stage_seed(cfg.seed, "ablate", g, v)
                tables.append(
                    ablation_suite(
                        net,
                        planner_trajs,
                        index,
                        stats,
                        g,
                        v,
                        diffusion_cfg=cfg.diffusion,
                        preference_cfg=cfg.preference,
                        align_cfg=cfg.align,
                        eval_cfg=cfg.eval,
                        env=cfg.env,
                        seed=seed,
                        progress=self.progress,
                    )
                )
        table = pd.concat(tables, ignore_index=True)
        write_csv(table, self.run.file("ablation.csv"), self.fingerprint)
        return ["ablation.csv"], seeds

    def _report(self):
        cfg, outputs = self.cfg, []
        table = pd.concat(
            [read_csv(self.run.file(name))[0] for name in self._eval_tables()], ignore_index=True
        )
        summary = (
            table.groupby(["gait", "v_cmd", "planner", "disturbance"], sort=False)[
                ["stability_pct", "mean_velocity"]
            ]
            .mean()
            .reset_index()
        )
        write_csv(summary, self.run.file("report.csv"), self.fingerprint)
        outputs.append("report.csv")

        doc = dict(fingerprint=self.fingerprint, deltas=stability_deltas(summary, cfg.eval))
        if self.run.exists("ablation.csv"):
            ablation, _ = read_csv(self.run.file("ablation.csv"))
            doc["ablation"] = ablation_deltas(ablation)
        if self.run.exists("label_agreement.json"):
            doc["label_agreement"] = json.loads(
                self.run.file("label_agreement.json").read_text()
            )["agreement"]
        write_json(self.run.file("report.json"), doc)
        outputs.append("report.json")

        shown = summary[np.isclose(summary["disturbance"], cfg.eval.disturbance)]
        if len(shown) == 0:
            shown = summary
        fig = StabilityPlot(shown)
        fig.title(f"Stability at δ = {shown['disturbance'].iloc[0]:g} m/s")
        fig.save(self.run.file("stability.png"))
        plt.close(fig.fig)
        outputs.append("stability.png")

        for g in cfg.gaits:
            for v in cfg.v_cmds:
                tag = f"{g}_{speed_tag(v)}"
                traces = {}
                for kind in cfg.eval.planners:
                    name = f"trace_{tag}_{kind}_0.csv"
                    if self.run.exists(name):
                        trace, found = read_csv(self.run.file(name))
                        if found != self.fingerprint:
                            raise ArtifactError(
                                f"{self.run.file(name)} was produced with config fingerprint "
                                f"{found}, the current configuration has {self.fingerprint}"
                            )
                        traces[kind] = trace
                if traces:
                    fig = TracePlot(traces, v_cmd=v)
                    fig.title(f"{g} at {v:g} m/s")
                    fig.save(self.run.file(f"traces_{tag}.png"))
                    plt.close(fig.fig)
                    outputs.append(f"traces_{tag}.png")
        return outputs, {}


def stability_deltas(summary, eval_cfg):
    """Stability differences between planners per gait

    Args:
        summary (pd.DataFrame): Mean stability per gait, v_cmd, planner and disturbance
        eval_cfg (EvalConfig): Evaluation protocol

    Returns:
        dict: ``bc_vs_untrained`` at the nominal disturbance and ``aligned_vs_bc`` at the
        largest disturbance, each by gait and averaged over the commanded speeds
    """

    def delta(disturbance, better, worse):
        rows = summary[np.isclose(summary["disturbance"], disturbance)]
        pivot = rows.pivot_table(index="gait", columns="planner", values="stability_pct")
        if better not in pivot or worse not in pivot:
            return {}
        return {g: float(d) for g, d in (pivot[better] - pivot[worse]).items()}

    return dict(
        bc_vs_untrained=delta(eval_cfg.disturbance, "bc", "untrained"),
        aligned_vs_bc=delta(max(eval_cfg.disturbances), "aligned", "bc"),
    )


def ablation_deltas(ablation):
    """Summary of the ablation grid

    Returns:
        dict: Per gait the stability gain of regularization (largest minus smallest weight)
        and of the pair budget (largest minus smallest scale), and the mean weak/strong gap
    """

    def gain(column):
        means = ablation.groupby(["gait", column])["stability_pct"].mean().unstack()
        return {g: float(row.iloc[-1] - row.iloc[0]) for g, row in means.iterrows()}

    gap = ablation.drop_duplicates(["gait", "v_cmd", "pair_scale", "regularization"])
    return dict(
        regularization=gain("regularization"),
        pair_budget=gain("pair_scale"),
        weak_strong_gap=float(gap["weak_strong_gap"].mean()),
    )


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
