"""Operator entry point: gen-data, train, sample, eval, flops.

Runs are configured by plain key=value files with dotted section keys
(backbone.dim=64, train.steps=2000, sampler.cfg_scale=9.0, data.n=5000)
plus repeatable --set overrides; overrides win.  A single global `seed`
feeds any section seed left unset through a documented derivation:
sub-seed(section) = SeedSequence([seed, tag]).generate_state(1)[0] with
tags data=1, train=2, sampler=3.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import Counter, defaultdict
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, gradient_check, load_checkpoint
from .codec import (
    GridImage,
    PromptGroup,
    QA_KINDS,
    Sample,
    SampleSpec,
    gen_sample,
    mini_geneval,
    parse_caption,
    read_corpus,
    write_corpus,
)
from .errors import ConfigError, DataError, InvariantViolation
from .flops import ar_flops_cache, ar_flops_nocache, diffusion_flops, measure_latency
from .sampler import SamplerConfig, image_to_text, text_to_image, vqa
from .trainer import TrainConfig, batch_loss_tensor, make_batch, train_loop

SECTION_TYPES = {
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "data": SampleSpec,
}
SEED_TAGS = {"data": 1, "train": 2, "sampler": 3}
EXTRA_KEYS = ("seed", "data.n", "data.seed")


# ------------------------------------------------------------ configuration


def parse_kv_lines(lines: Sequence[str], source: str) -> dict[str, str]:
    out = {}
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{num}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(ns) -> dict[str, str]:
    kv: dict[str, str] = {}
    config = getattr(ns, "config", None)
    if config:
        path = Path(config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        kv.update(parse_kv_lines(path.read_text(encoding="utf-8").splitlines(), str(path)))
    for pair in getattr(ns, "set", None) or []:
        kv.update(parse_kv_lines([pair], "--set"))
    return kv


def known_keys() -> set[str]:
    keys = set(EXTRA_KEYS)
    for section, cls in SECTION_TYPES.items():
        keys.update(f"{section}.{f.name}" for f in fields(cls))
    return keys


def _convert(key: str, raw: str, default):
    try:
        if key == "sampler.top_k":
            return None if raw.lower() in ("none", "") else int(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def derive_seed(global_seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(global_seed), int(tag)]).generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    seed: int
    backbone: BackboneConfig
    train: TrainConfig
    sampler: SamplerConfig
    data: SampleSpec
    data_n: int
    data_seed: int


def build_run_config(kv: dict[str, str]) -> RunConfig:
    unknown = sorted(set(kv) - known_keys())
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    seed = _convert("seed", kv.get("seed", "0"), 0)
    built = {}
    for section, cls in SECTION_TYPES.items():
        values = {}
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key in kv:
                values[f.name] = _convert(key, kv[key], f.default)
        if section in SEED_TAGS and "seed" not in values and any(f.name == "seed" for f in fields(cls)):
            values["seed"] = derive_seed(seed, SEED_TAGS[section])
        try:
            built[section] = cls(**values)
        except DataError as exc:
            raise ConfigError(str(exc)) from None
    data_n = _convert("data.n", kv.get("data.n", "5000"), 0)
    if data_n < 0:
        raise ConfigError("data.n must be >= 0")
    data_seed = (
        _convert("data.seed", kv["data.seed"], 0) if "data.seed" in kv else derive_seed(seed, 1)
    )
    return RunConfig(
        seed=seed,
        backbone=built["backbone"],
        train=built["train"],
        sampler=built["sampler"],
        data=built["data"],
        data_n=data_n,
        data_seed=data_seed,
    )


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


# -------------------------------------------------------------- subcommands


def render_grid(grid: GridImage) -> str:
    """Two letters per cell: color initial (upper) + shape initial (lower)."""
    rows = []
    for r in range(grid.height):
        row = []
        for c in range(grid.width):
            cell = grid.cell(r, c)
            row.append(".." if cell is None else cell[1][0].upper() + cell[0][0])
        rows.append(" ".join(row))
    return "\n".join(rows)


def cmd_gen_data(ns) -> int:
    cfg = build_run_config(load_config(ns))
    rng = np.random.default_rng(cfg.data_seed)
    samples = [gen_sample(rng, cfg.data) for _ in range(cfg.data_n)]
    write_corpus(ns.out, samples, cfg.data, cfg.data_seed)
    print(f"wrote {len(samples)} samples to {ns.out} (seed {cfg.data_seed})")
    if samples:
        kinds = Counter(q.kind for s in samples for q in s.qa)
        print("qa kinds: " + " ".join(f"{k}={kinds.get(k, 0)}" for k in QA_KINDS))
        mean_objects = np.mean([len(s.grid.objects()) for s in samples])
        print(f"mean objects per grid: {mean_objects:.2f}")
    return 0


def _check_corpus_shape(header: dict, bb: BackboneConfig, tc: Optional[TrainConfig]) -> None:
    if header["width"] * header["height"] != bb.image_len:
        raise ConfigError(
            f"corpus grid {header['width']}x{header['height']} does not match "
            f"backbone image length {bb.image_len}"
        )
    if header["text_len"] != bb.text_len:
        raise ConfigError(
            f"corpus text length {header['text_len']} != backbone text length {bb.text_len}"
        )
    if tc is not None and tc.text_len != bb.text_len:
        raise ConfigError(
            f"train text length {tc.text_len} != backbone text length {bb.text_len}"
        )


def cmd_train(ns) -> int:
    cfg = build_run_config(load_config(ns))
    corpus_path = _require_file(ns.corpus, "corpus")
    header, samples = read_corpus(corpus_path)
    _check_corpus_shape(header, cfg.backbone, cfg.train)
    resume = _require_file(ns.resume, "resume checkpoint") if ns.resume else None
    if resume is not None:
        model = load_checkpoint(resume)[0]
    else:
        model = Backbone(cfg.backbone, np.random.default_rng(cfg.train.seed))
    gate_cfg = replace(cfg.train, batch_size=4, precision="high", joint_training=True)
    gate_items = make_batch(samples, gate_cfg, np.random.default_rng([cfg.train.seed, 0]))
    report = gradient_check(
        model,
        lambda m: batch_loss_tensor(m, gate_items, gate_cfg),
        ns.gate_coords,
        np.random.default_rng([cfg.train.seed, 1]),
    )
    if not report.ok():
        raise InvariantViolation(
            f"gradient gate failed: max rel err {report.max_rel_err:.3e} at {report.worst}"
        )
    print(
        f"gradient gate passed: {report.n_checked} coordinates, "
        f"max rel err {report.max_rel_err:.2e}"
    )
    model, metrics = train_loop(samples, cfg.train, cfg.backbone, ns.out, resume_from=resume)
    if metrics:
        print(f"trained {len(metrics)} steps, final loss {metrics[-1]['loss']:.4f}")
    print(f"checkpoints and metrics.jsonl in {ns.out}")
    return 0


def _load_grid(ns) -> GridImage:
    corpus_path = _require_file(ns.corpus, "corpus (needed for the input image)")
    _, samples = read_corpus(corpus_path)
    if not 0 <= ns.index < len(samples):
        raise DataError(f"sample index {ns.index} out of range [0, {len(samples)})")
    return samples[ns.index].grid


def cmd_sample(ns) -> int:
    cfg = build_run_config(load_config(ns))
    model = load_checkpoint(_require_file(ns.checkpoint, "checkpoint"))[0]
    sc = cfg.sampler
    rng = np.random.default_rng(sc.seed)
    if ns.task == "t2i":
        if not ns.prompt:
            raise ConfigError("t2i needs --prompt")
        words = tuple(ns.prompt.split())
        grid, trace = text_to_image(model, words, sc, ns.width, ns.height, rng=rng)
        print(f"prompt: {' '.join(words)}")
        print(render_grid(grid))
        print("legend: color initial + shape initial, .. = empty")
    elif ns.task == "i2t":
        grid = _load_grid(ns)
        words, trace = image_to_text(model, grid, sc, rng=rng)
        print(render_grid(grid))
        print(f"caption: {' '.join(words)}")
    else:
        if not ns.question:
            raise ConfigError("vqa needs --question")
        grid = _load_grid(ns)
        question = tuple(ns.question.split())
        answer, trace = vqa(model, grid, question, sc, rng=rng)
        print(f"question: {' '.join(question)}")
        print(f"answer: {' '.join(answer)}")
    if ns.trace:
        Path(ns.trace).write_text("\n".join(trace.jsonl_lines()) + "\n", encoding="utf-8")
        print(f"trace: {ns.trace} ({len(trace.steps)} steps, {trace.model_calls} model calls)")
    return 0


# ----------------------------------------------------------------- metrics


def eval_t2i(model, samples: Sequence[Sample], sc: SamplerConfig, n: int) -> dict:
    cats: dict[str, list[float]] = defaultdict(list)
    for i, sample in enumerate(samples[:n]):
        grid, _ = text_to_image(
            model, sample.caption, sc, rng=np.random.default_rng([sc.seed, 101, i])
        )
        for key, value in mini_geneval(sample.caption, grid).items():
            cats[key].append(value)
    out = {"t2i_overall": float(np.mean(cats["overall"]))}
    single = cats.get("single_object")
    out["t2i_single_object"] = float(np.mean(single)) if single else None
    return out


def _is_single_object(sample: Sample) -> bool:
    if len(sample.grid.objects()) != 1:
        return False
    parsed = parse_caption(sample.caption)
    return (
        len(parsed.groups) == 1
        and parsed.groups[0].count == 1
        and parsed.groups[0].color is not None
    )


def eval_i2t(model, samples: Sequence[Sample], sc: SamplerConfig, n: int) -> Optional[float]:
    singles = [s for s in samples if _is_single_object(s)][:n]
    if not singles:
        return None
    hits = 0
    for i, sample in enumerate(singles):
        words, _ = image_to_text(model, sample.grid, sc, rng=np.random.default_rng([sc.seed, 202, i]))
        try:
            parsed = parse_caption(words)
        except DataError:
            continue
        _, _, shape, color = sample.grid.objects()[0]
        hits += parsed.relation is None and parsed.groups == (PromptGroup(1, color, shape),)
    return hits / len(singles)


def eval_vqa(model, samples: Sequence[Sample], sc: SamplerConfig, n: int) -> dict:
    per_kind: dict[str, list[float]] = defaultdict(list)
    for i, sample in enumerate(samples[:n]):
        for j, pair in enumerate(sample.qa):
            answer, _ = vqa(
                model, sample.grid, pair.question, sc,
                rng=np.random.default_rng([sc.seed, 303, i, j]),
            )
            per_kind[pair.kind].append(float(tuple(answer) == tuple(pair.answer)))
    everything = [v for scores in per_kind.values() for v in scores]
    out = {"vqa_exact": float(np.mean(everything)) if everything else None}
    for kind in ("counting", "color"):
        scores = per_kind.get(kind)
        out[f"vqa_{kind}"] = float(np.mean(scores)) if scores else None
    return out


EVAL_COLUMNS = (
    "sweep",
    "point",
    "n",
    "t2i_overall",
    "t2i_single_object",
    "i2t_exact",
    "vqa_exact",
    "vqa_counting",
    "vqa_color",
    "monotone_trend",
)

DEFAULT_TASKS = {
    "timesteps": "t2i",
    "joint_training": "t2i,vqa",
    "text_loss_weight": "t2i,i2t",
}


def _run_tasks(model, samples, sc: SamplerConfig, n: int, tasks: set[str]) -> dict:
    row: dict = {"n": n}
    if "t2i" in tasks:
        row.update(eval_t2i(model, samples, sc, n))
    if "i2t" in tasks:
        row["i2t_exact"] = eval_i2t(model, samples, sc, n)
    if "vqa" in tasks:
        row.update(eval_vqa(model, samples, sc, n))
    return row


def _parse_points(pairs: Optional[Sequence[str]]) -> list[tuple[str, Path]]:
    if not pairs:
        raise ConfigError("this sweep needs at least one --point NAME=CHECKPOINT")
    out = []
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--point expects NAME=CHECKPOINT, got {pair!r}")
        name, path = pair.split("=", 1)
        out.append((name, _require_file(path, f"checkpoint for point {name!r}")))
    return out


def cmd_eval(ns) -> int:
    cfg = build_run_config(load_config(ns))
    header, samples = read_corpus(_require_file(ns.corpus, "corpus"))
    if ns.n < 1 or not samples:
        raise DataError("empty held-out evaluation set")
    tasks = set((ns.tasks or DEFAULT_TASKS[ns.sweep]).split(","))
    bad = tasks - {"t2i", "i2t", "vqa"}
    if bad:
        raise ConfigError(f"unknown eval task {sorted(bad)[0]!r}")
    sc = cfg.sampler
    rows: list[dict] = []
    if ns.sweep == "timesteps":
        model = load_checkpoint(_require_file(ns.checkpoint, "checkpoint"))[0]
        _check_corpus_shape(header, model.config, None)
        for point in (int(x) for x in ns.timesteps.split(",")):
            row = {"sweep": ns.sweep, "point": point}
            row.update(_run_tasks(model, samples, replace(sc, steps=point), ns.n, tasks))
            rows.append(row)
        overall = [r.get("t2i_overall") for r in rows]
        if all(v is not None for v in overall):
            trend = all(b >= a for a, b in zip(overall, overall[1:]))
            for row in rows:
                row["monotone_trend"] = trend
    else:
        for name, path in _parse_points(ns.point):
            model = load_checkpoint(path)[0]
            _check_corpus_shape(header, model.config, None)
            row = {"sweep": ns.sweep, "point": name}
            row.update(_run_tasks(model, samples, sc, ns.n, tasks))
            rows.append(row)
    with open(ns.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in EVAL_COLUMNS})
    for row in rows:
        parts = [f"{k}={row[k]}" for k in EVAL_COLUMNS if row.get(k) not in (None, "")]
        print("  ".join(parts))
    print(f"results: {ns.out}")
    return 0


def _int_list(raw: str, what: str) -> list[int]:
    try:
        values = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list {raw!r}") from None
    if not values:
        raise ConfigError(f"empty {what} list")
    return values


def cmd_flops(ns) -> int:
    cfg = build_run_config(load_config(ns))
    lengths = _int_list(ns.lengths, "lengths")
    dims = _int_list(ns.dims, "dims")
    steps = _int_list(ns.steps, "steps")
    model = None
    if ns.measure:
        if ns.checkpoint:
            model = load_checkpoint(_require_file(ns.checkpoint, "checkpoint"))[0]
        else:
            model = Backbone(cfg.backbone, np.random.default_rng(cfg.seed))
    columns = ["L", "D", "T", "ar_nocache", "ar_cache", "diffusion", "diffusion_cfg"]
    if ns.measure:
        columns += ["seq_seconds", "par_seconds", "speedup"]
    rows = []
    for L in lengths:
        for D in dims:
            for T in steps:
                diff = diffusion_flops(T, L, D)
                row = {
                    "L": L,
                    "D": D,
                    "T": T,
                    "ar_nocache": ar_flops_nocache(L, D).exact_attention_units,
                    "ar_cache": ar_flops_cache(L, D).exact_attention_units,
                    "diffusion": diff.exact_attention_units,
                    "diffusion_cfg": diff.units_with_cfg,
                }
                if model is not None and L <= model.config.text_len:
                    seq, par = measure_latency(model, L, T, trials=ns.trials)
                    row["seq_seconds"] = round(seq.wall_clock_seconds, 4)
                    row["par_seconds"] = round(par.wall_clock_seconds, 4)
                    row["speedup"] = round(
                        seq.wall_clock_seconds / par.wall_clock_seconds, 2
                    )
                rows.append(row)
    widths = {c: max(len(c), max(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    print("  ".join(c.rjust(widths[c]) for c in columns))
    for row in rows:
        print("  ".join(str(row.get(c, "")).rjust(widths[c]) for c in columns))
    if ns.measure:
        print("note: analytic units count attention scores only; measured columns "
              "use the loaded backbone's own width")
    if ns.csv:
        with open(ns.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(rows)
        print(f"csv: {ns.csv}")
    return 0


# --------------------------------------------------------------- entrypoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unimask",
        description="Unified masked-token diffusion over grid images and captions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument(
            "--set", action="append", metavar="KEY=VALUE", help="config override (wins over file)"
        )

    gen = sub.add_parser("gen-data", help="write a synthetic corpus")
    common(gen)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="run the training loop")
    common(train)
    train.add_argument("--corpus", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--gate-coords", type=int, default=200)
    train.set_defaults(func=cmd_train)

    sample = sub.add_parser("sample", help="decode one of the three tasks")
    common(sample)
    sample.add_argument("--task", choices=("t2i", "i2t", "vqa"), required=True)
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--prompt", help="t2i prompt words")
    sample.add_argument("--question", help="vqa question words")
    sample.add_argument("--corpus", help="corpus supplying the input image")
    sample.add_argument("--index", type=int, default=0)
    sample.add_argument("--width", type=int, default=8)
    sample.add_argument("--height", type=int, default=8)
    sample.add_argument("--trace", help="write the decode trace (JSON lines)")
    sample.set_defaults(func=cmd_sample)

    ev = sub.add_parser("eval", help="sweep a knob and score the tasks")
    common(ev)
    ev.add_argument("--sweep", choices=tuple(DEFAULT_TASKS), required=True)
    ev.add_argument("--corpus", required=True, help="held-out corpus")
    ev.add_argument("--out", required=True, help="results CSV")
    ev.add_argument("--checkpoint", help="model for the timesteps sweep")
    ev.add_argument("--point", action="append", metavar="NAME=CHECKPOINT")
    ev.add_argument("--timesteps", default="8,16,32")
    ev.add_argument("--n", type=int, default=50, help="held-out samples per point")
    ev.add_argument("--tasks", help="comma list among t2i,i2t,vqa")
    ev.set_defaults(func=cmd_eval)

    fl = sub.add_parser("flops", help="analytic cost table, optionally measured")
    common(fl)
    fl.add_argument("--lengths", default="64,77,256,1024")
    fl.add_argument("--dims", default="64")
    fl.add_argument("--steps", default="8,16,64")
    fl.add_argument("--csv")
    fl.add_argument("--measure", action="store_true")
    fl.add_argument("--checkpoint")
    fl.add_argument("--trials", type=int, default=5)
    fl.set_defaults(func=cmd_flops)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
