"""End-to-end pipeline steps and scripted experiment recipes.

Recipes (each runs its matrix over several seeds and writes a CSV plus an
SVG chart): mode-combos, alignment-ablation, explicit-vs-implicit,
efficiency, scale-sweep.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import gridworld as gw
from .config import PipelineConfig
from .data import ExpertTrajectory, build_samples, load_dataset, serialize_dataset
from .errors import MissingArtifactError
from .evaluation import (
    EvalConfig,
    ModelPolicy,
    measure_aps,
    metrics,
    run_episode,
    svg_bar_chart,
    svg_line_chart,
    write_metrics_csv,
    write_reports_jsonl,
)
from .model import ModelConfig, init_params, load_model, save_model
from .serialization import RunManifest, sha256_file
from .training import ALL_MODES, MODE_NAMES, TrainConfig, train, write_training_csv
from .vocab import Vocabulary


def _world_seeds(base: int, count: int) -> list[int]:
    return [base + i for i in range(count)]


def make_trajectories(
    cfg: PipelineConfig, base_seed: int, n_worlds: int, tasks_per_world: int, n_subgoals: int
) -> list[ExpertTrajectory]:
    trajs = []
    for ws in _world_seeds(base_seed, n_worlds):
        world = gw.generate_world(ws, cfg.world)
        task_rng = np.random.default_rng(np.random.SeedSequence([ws, 1]))
        for ti in range(tasks_per_world):
            n = n_subgoals if n_subgoals else None
            task = gw.generate_task(world, task_rng, n_subgoals=n)
            pairs = gw.expert_trajectory(world, task)
            trajs.append(ExpertTrajectory(world, task, pairs, uid=f"w{ws}-t{ti}"))
    return trajs


def make_eval_set(cfg: PipelineConfig, seed_shift: int = 0) -> list[tuple[gw.GridWorld, gw.Task]]:
    """Held-out worlds/tasks; seeds are offset so they never collide with
    the training worlds."""
    out = []
    base = cfg.data.seed + cfg.eval.seed_offset + seed_shift * 1000
    for ws in _world_seeds(base, cfg.eval.n_worlds):
        world = gw.generate_world(ws, cfg.world)
        task_rng = np.random.default_rng(np.random.SeedSequence([ws, 2]))
        for _ in range(cfg.eval.tasks_per_world):
            n = cfg.eval.n_subgoals if cfg.eval.n_subgoals else None
            out.append((world, gw.generate_task(world, task_rng, n_subgoals=n)))
    return out


def collect_codec_images(trajs: list[ExpertTrajectory], cap: int) -> np.ndarray:
    images = []
    for traj in trajs:
        for obs, _ in traj.pairs:
            images.extend(obs.views())
            if len(images) >= cap:
                return np.array(images[:cap])
    return np.array(images)


def build_codec(cfg: PipelineConfig, out_dir: str | Path) -> tuple[codec_mod.Codec, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajs = make_trajectories(
        cfg, cfg.data.seed, max(4, cfg.data.n_worlds // 2), 2, cfg.data.n_subgoals
    )
    images = collect_codec_images(trajs, cfg.data.codec_image_cap)
    codec = codec_mod.train_codec(images, cfg.codec, min_images=min(500, len(images)))
    path = out_dir / "codec.bin"
    digest = codec_mod.save_codec(codec, path)
    manifest = RunManifest(cfg.to_json(), {"codec_seed": cfg.codec.seed, "data_seed": cfg.data.seed})
    manifest.record_hash("codec.bin", digest)
    manifest.save(out_dir / "codec_manifest.json")
    return codec, path


def gen_dataset(cfg: PipelineConfig, codec: codec_mod.Codec, out_dir: str | Path) -> tuple[Path, dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajs = make_trajectories(
        cfg, cfg.data.seed, cfg.data.n_worlds, cfg.data.tasks_per_world, cfg.data.n_subgoals
    )
    augment_rng = np.random.default_rng(cfg.data.seed + 77) if cfg.data.augment else None
    samples, stats = build_samples(
        trajs,
        codec,
        k=cfg.data.k,
        prefix=cfg.data.prefix,
        history_cap=cfg.data.history_cap,
        augment_rng=augment_rng,
    )
    vocab = cfg.vocabulary()
    path = out_dir / "dataset.jsonl"
    digest = serialize_dataset(
        samples,
        path,
        vocab_hash=vocab.manifest_hash(),
        codec_hash=codec_mod.codec_hash(codec),
        k=cfg.data.k,
        seeds={"data": cfg.data.seed},
        history_cap=cfg.data.history_cap,
        prefix=cfg.data.prefix,
    )
    stats_doc = stats.to_json()
    (out_dir / "dataset_stats.json").write_text(json.dumps(stats_doc, indent=2) + "\n")
    manifest = RunManifest(cfg.to_json(), {"data_seed": cfg.data.seed})
    manifest.record_hash("dataset.jsonl", digest)
    manifest.save(out_dir / "dataset_manifest.json")
    return path, stats_doc


def train_policy(
    cfg: PipelineConfig,
    dataset_path: str | Path,
    out_dir: str | Path,
    train_config: TrainConfig | None = None,
    tag: str = "model",
) -> tuple[Path, dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_path = Path(dataset_path)
    if not dataset_path.exists():
        raise MissingArtifactError(f"dataset not found: {dataset_path}")
    vocab = cfg.vocabulary()
    samples, header = load_dataset(dataset_path, expect_vocab_hash=vocab.manifest_hash())
    tc = train_config or cfg.train
    model_config = replace(cfg.model_config(), seed=cfg.model_seed + tc.seed)
    params = init_params(model_config)
    result = train(params, model_config, vocab, samples, tc)
    ckpt = out_dir / f"{tag}.bin"
    digest = save_model(params, model_config, vocab, ckpt)
    write_training_csv(result.history, out_dir / f"{tag}_training.csv")
    info = {
        "checkpoint": str(ckpt),
        "checkpoint_sha256": digest,
        "optimizer_steps": result.optimizer_steps,
        "phase_direct_steps": result.phase_direct_steps,
        "phase_joint_steps": result.phase_joint_steps,
        "stopped_early": result.stopped_early,
        "final_loss": result.history[-1] if result.history else {},
    }
    manifest = RunManifest(cfg.to_json() | {"train": tc.to_json()}, {"train_seed": tc.seed})
    manifest.record_hash(f"{tag}.bin", digest)
    manifest.record("dataset.jsonl", dataset_path)
    manifest.save(out_dir / f"{tag}_manifest.json")
    return ckpt, info


def evaluate_policy(
    cfg: PipelineConfig,
    checkpoint: str | Path,
    codec: codec_mod.Codec,
    mode: tuple[int, int],
    out_dir: str | Path | None = None,
    seed_shift: int = 0,
    tag: str = "eval",
) -> dict:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise MissingArtifactError(f"checkpoint not found: {checkpoint}")
    params, model_config, vocab = load_model(checkpoint)
    eval_cfg = EvalConfig(
        k=cfg.data.k,
        prefix=cfg.data.prefix,
        history_cap=cfg.data.history_cap,
        constrained=cfg.eval.constrained,
        trace_budget=cfg.eval.trace_budget,
    )
    policy = ModelPolicy(params, model_config, vocab, codec, eval_cfg)
    episodes = make_eval_set(cfg, seed_shift)
    reports = [
        run_episode(policy, world, task, mode, eval_cfg, task_id=f"{tag}-{i}")
        for i, (world, task) in enumerate(episodes)
    ]
    summary = metrics(reports)
    result = {"mode": MODE_NAMES[tuple(mode)], "episodes": len(reports), **summary.to_json()}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_reports_jsonl(reports, out_dir / f"{tag}_episodes.jsonl")
        (out_dir / f"{tag}_metrics.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def bench_codec(cfg: PipelineConfig, codec: codec_mod.Codec, out_dir: str | Path) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajs = make_trajectories(cfg, cfg.data.seed + 500, 3, 2, cfg.data.n_subgoals)
    images = collect_codec_images(trajs, 300)
    rows = codec_mod.benchmark_rows(codec, images)
    codec_mod.write_benchmark_csv(rows, out_dir / "codec_benchmark.csv")
    return rows


# ---------------------------------------------------------------------------
# Scripted recipes


def _mode_set(names: list[str]) -> tuple[tuple[int, int], ...]:
    inverse = {v: k for k, v in MODE_NAMES.items()}
    return tuple(inverse[n] for n in names)


def _train_eval_one(
    cfg: PipelineConfig,
    dataset: Path,
    codec: codec_mod.Codec,
    out_dir: Path,
    label: str,
    recipe: str,
    modes: tuple[tuple[int, int], ...],
    seed: int,
    steps: int,
    eval_mode: tuple[int, int] = (0, 0),
) -> dict:
    tc = replace(cfg.train, recipe=recipe, enabled_modes=modes, seed=seed, steps=steps)
    ckpt, info = train_policy(cfg, dataset, out_dir, tc, tag=f"{label}-s{seed}")
    summary = evaluate_policy(cfg, ckpt, codec, eval_mode, seed_shift=seed, tag=f"{label}-s{seed}")
    return {
        "label": label,
        "recipe": recipe,
        "modes": "+".join(MODE_NAMES[m] for m in modes),
        "seed": seed,
        "checkpoint_sha256": info["checkpoint_sha256"],
        "eval_mode": MODE_NAMES[eval_mode],
        **{k: summary[k] for k in ("sr", "isr", "csr", "cgt", "aps", "tokens_per_action")},
    }


def _prepare(cfg: PipelineConfig, out_dir: Path) -> tuple[codec_mod.Codec, Path]:
    codec, _ = build_codec(cfg, out_dir)
    dataset, _ = gen_dataset(cfg, codec, out_dir)
    return codec, dataset


def run_experiment(
    name: str,
    cfg: PipelineConfig,
    out_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mixture_steps = cfg.train.steps * 2
    aligned_steps = cfg.train.steps

    if name == "mode-combos":
        codec, dataset = _prepare(cfg, out_dir)
        rows = []
        combos = [
            ("non", "mixture", _mode_set(["non-cot"]), mixture_steps),
            ("non+t", "aligned", _mode_set(["non-cot", "t-cot"]), aligned_steps),
            ("non+v", "aligned", _mode_set(["non-cot", "v-cot"]), aligned_steps),
            ("non+mm", "aligned", _mode_set(["non-cot", "mm-cot"]), aligned_steps),
            ("all", "aligned", ALL_MODES, aligned_steps),
        ]
        for label, recipe, modes, steps in combos:
            for seed in seeds:
                rows.append(
                    _train_eval_one(cfg, dataset, codec, out_dir, label, recipe, modes, seed, steps)
                )
        _finish(rows, out_dir, "mode_combos", metric="isr")
        return rows

    if name == "alignment-ablation":
        codec, dataset = _prepare(cfg, out_dir)
        rows = []
        for label, recipe, steps in (
            ("aligned", "aligned", aligned_steps),
            ("mixture", "mixture", mixture_steps),
        ):
            for seed in seeds:
                rows.append(
                    _train_eval_one(cfg, dataset, codec, out_dir, label, recipe, ALL_MODES, seed, steps)
                )
        _finish(rows, out_dir, "alignment_ablation", metric="isr")
        return rows

    if name == "explicit-vs-implicit":
        codec, dataset = _prepare(cfg, out_dir)
        rows = []
        pairings = [
            ("t-cot", _mode_set(["non-cot", "t-cot"]), (1, 0)),
            ("v-cot", _mode_set(["non-cot", "v-cot"]), (0, 1)),
            ("mm-cot", _mode_set(["non-cot", "mm-cot"]), (1, 1)),
        ]
        for label, modes, explicit_mode in pairings:
            for seed in seeds:
                tc = replace(cfg.train, recipe="aligned", enabled_modes=modes, seed=seed, steps=aligned_steps)
                ckpt, info = train_policy(cfg, dataset, out_dir, tc, tag=f"{label}-s{seed}")
                for way, mode in (("explicit", explicit_mode), ("implicit", (0, 0))):
                    summary = evaluate_policy(
                        cfg, ckpt, codec, mode, seed_shift=seed, tag=f"{label}-{way}-s{seed}"
                    )
                    rows.append(
                        {
                            "label": label,
                            "inference": way,
                            "seed": seed,
                            "checkpoint_sha256": info["checkpoint_sha256"],
                            **{k: summary[k] for k in ("sr", "isr", "csr", "cgt", "aps", "tokens_per_action")},
                        }
                    )
        _finish(rows, out_dir, "explicit_vs_implicit", metric="isr", group_keys=("label", "inference"))
        return rows

    if name == "efficiency":
        codec, dataset = _prepare(cfg, out_dir)
        rows = []
        for seed in seeds:
            tc = replace(cfg.train, recipe="aligned", enabled_modes=ALL_MODES, seed=seed, steps=aligned_steps)
            ckpt, info = train_policy(cfg, dataset, out_dir, tag=f"eff-s{seed}", train_config=tc)
            params, model_config, vocab = load_model(ckpt)
            eval_cfg = EvalConfig(
                k=cfg.data.k, prefix=cfg.data.prefix, history_cap=cfg.data.history_cap,
                constrained=True, trace_budget=cfg.eval.trace_budget,
            )
            policy = ModelPolicy(params, model_config, vocab, codec, eval_cfg)
            episodes = make_eval_set(cfg, seed)[: max(6, cfg.eval.n_worlds)]
            for label, mode in (
                ("implicit-non-cot", (0, 0)),
                ("explicit-t-cot", (1, 0)),
                ("explicit-v-cot", (0, 1)),
                ("explicit-mm-cot", (1, 1)),
            ):
                res = measure_aps(policy, episodes, mode, eval_cfg)
                rows.append(
                    {
                        "label": label,
                        "seed": seed,
                        "checkpoint_sha256": info["checkpoint_sha256"],
                        "aps": res["aps"],
                        "aps_total": res["aps_total"],
                        "tokens_per_action": res["tokens_per_action"],
                        "n_actions": res["n_actions"],
                    }
                )
        _finish(rows, out_dir, "efficiency", metric="aps")
        return rows

    if name == "scale-sweep":
        rows = []
        for prefix in range(1, len(cfg.codec.schedule) + 1):
            sub_dir = out_dir / f"prefix{prefix}"
            doc = cfg.to_json()
            doc["data"]["prefix"] = prefix
            sub_cfg = PipelineConfig.from_json(doc)
            codec, dataset = _prepare(sub_cfg, sub_dir)
            for seed in seeds:
                row = _train_eval_one(
                    sub_cfg, dataset, codec, sub_dir, f"prefix{prefix}", "aligned",
                    _mode_set(["non-cot", "v-cot"]), seed, aligned_steps,
                )
                row["prefix"] = prefix
                rows.append(row)
        write_metrics_csv(rows, out_dir / "scale_sweep.csv")
        prefixes = sorted({r["prefix"] for r in rows})
        means = [float(np.mean([r["isr"] for r in rows if r["prefix"] == p])) for p in prefixes]
        svg_line_chart([float(p) for p in prefixes], {"isr": means}, "ISR vs latent scale prefix", out_dir / "scale_sweep.svg")
        return rows

    raise ValueError(
        f"unknown experiment {name!r}; expected one of mode-combos, alignment-ablation, "
        "explicit-vs-implicit, efficiency, scale-sweep"
    )


def _finish(rows: list[dict], out_dir: Path, stem: str, metric: str, group_keys=("label",)) -> None:
    write_metrics_csv(rows, out_dir / f"{stem}.csv")
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = tuple(str(row[k]) for k in group_keys)
        groups.setdefault(key, []).append(float(row[metric]))
    labels = ["/".join(k) for k in groups]
    means = [float(np.mean(v)) for v in groups.values()]
    svg_bar_chart(labels, {metric: means}, f"{stem}: mean {metric} over seeds", out_dir / f"{stem}.svg")
