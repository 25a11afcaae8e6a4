"""Command-line pipeline: dataset generation, training, evaluation sweeps
and the backbone complexity benchmark.

Every command resolves its configuration as preset < JSON file < CLI
overrides, writes a manifest next to each output, exits nonzero on any
error, and removes partial outputs. `CPMAMBA_THREADS` caps internal
parallelism (dataset generation, evaluation groups).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .channel.dataset import CsiDataset, DatasetSpec, build_dataset, read_csid, write_csid
from .channel.geometry import ArrayGeometry
from .channel.simulate import ChannelConfig
from .errors import ConfigError, CpmambaError
from .model import ModelConfig, forward, init_model, load_state, save_state
from .numerics import Tensor, stream
from .train_eval import TrainConfig, baseline_linear, baseline_np, evaluate, train

_PRESETS = ("desk", "paper")


def _threads() -> int:
    raw = os.environ.get("CPMAMBA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CPMAMBA_THREADS must be an integer, got {raw!r}") from None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# config resolution


def _preset_sections(preset: str) -> dict:
    if preset == "desk":
        return {
            "channel": ChannelConfig.desk(),
            "dataset": DatasetSpec.desk(),
            "model": ModelConfig.desk(),
            "train": TrainConfig.desk(),
        }
    if preset == "paper":
        return {
            "channel": ChannelConfig.paper(),
            "dataset": DatasetSpec.paper(),
            "model": ModelConfig.paper(),
            "train": TrainConfig.paper(),
        }
    raise ConfigError(f"unknown preset {preset!r}; expected one of {_PRESETS}")


def _section_to_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return d


def _merge_section(name: str, base: dict, override: dict) -> dict:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown field {key!r} in config section {name!r}")
        if key == "geometry" and value is not None:
            want = {"n_h", "n_v", "d_x", "d_z"}
            if not isinstance(value, dict):
                raise ConfigError("channel.geometry must be an object")
            missing = want - set(value)
            extra = set(value) - want
            if missing:
                raise ConfigError(f"channel.geometry is missing field {sorted(missing)[0]!r}")
            if extra:
                raise ConfigError(f"unknown field {sorted(extra)[0]!r} in channel.geometry")
        if key in ("snr_range_db", "delay_window") and isinstance(value, list):
            value = tuple(value)
        base[key] = value
    return base


def _build_sections(d: dict) -> dict:
    channel = d["channel"]
    geom = channel.get("geometry")
    if geom is not None and isinstance(geom, dict):
        channel = {**channel, "geometry": ArrayGeometry(**geom)}
    return {
        "channel": ChannelConfig(**channel),
        "dataset": DatasetSpec(**d["dataset"]),
        "model": ModelConfig(**d["model"]),
        "train": TrainConfig(**d["train"]),
    }


def resolve_config(preset: str, config_path=None, overrides: dict | None = None) -> dict:
    """Preset defaults, then JSON file, then per-flag overrides."""
    sections = {k: _section_to_dict(v) for k, v in _preset_sections(preset).items()}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {config_path} is not valid JSON: {e}") from e
        unknown = set(file_cfg) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config section {sorted(unknown)[0]!r}")
        for name, overd in file_cfg.items():
            if not isinstance(overd, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            _merge_section(name, sections[name], overd)
    for dotted, value in (overrides or {}).items():
        section, _, field = dotted.partition(".")
        if section not in sections or not field:
            raise ConfigError(f"override {dotted!r} is not of the form section.field")
        _merge_section(section, sections[section], {field: value})
    return _build_sections(sections)


def _config_dict(sections: dict) -> dict:
    return {k: _section_to_dict(v) for k, v in sections.items()}


# ---------------------------------------------------------------------------
# manifests and output tracking


class _Outputs:
    """Tracks files created by a command so failures leave nothing behind."""

    def __init__(self):
        self.paths: list = []

    def add(self, path) -> str:
        self.paths.append(str(path))
        return str(path)

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                os.unlink(p)
            except OSError:
                pass


def _write_manifest(out_path, command: str, seed: int, config: dict, inputs: dict, started: float, extra=None) -> str:
    manifest = {
        "command": command,
        "config": config,
        "cpmamba_version": __version__,
        "inputs": {str(k): _sha256(k) for k in inputs},
        "outputs": {str(out_path): _sha256(out_path)},
        "seed": seed,
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = str(out_path) + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_grid(spec: str) -> list:
    try:
        lo, hi, step = (float(v) for v in spec.split(":"))
    except ValueError:
        raise ConfigError(f"grid must be lo:hi:step, got {spec!r}") from None
    if step <= 0 or hi < lo:
        raise ConfigError(f"bad grid {spec!r}")
    return [float(v) for v in np.arange(lo, hi + step / 2, step)]


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not of the form section.field=value")
        out[key] = json.loads(value) if value and value[0] in "-0123456789[{tfn\"" else value
    return out


def _check_data_matches_model(data: CsiDataset, mcfg: ModelConfig, path) -> None:
    t_need = mcfg.history_len + mcfg.horizon
    if data.n_frames < t_need:
        raise ConfigError(
            f"{path}: dataset has {data.n_frames} frames per sample, model needs {t_need}"
        )
    if data.frames.shape[-1] != 2 * mcfg.k_sub:
        raise ConfigError(
            f"{path}: dataset has {data.frames.shape[-1]} subcarriers, "
            f"model expects {2 * mcfg.k_sub}"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.time()
    sections = resolve_config(args.preset, args.config, _parse_overrides(args.set))
    outs = _Outputs()
    try:
        ds = build_dataset(sections["channel"], sections["dataset"], args.split, args.seed, workers=_threads())
        write_csid(outs.add(args.out), ds)
        outs.add(
            _write_manifest(
                args.out, "gen-data", args.seed, _config_dict(sections), {}, started,
                extra={"split": args.split, "n_samples": int(ds.n_samples)},
            )
        )
    except BaseException:
        outs.cleanup()
        raise
    print(f"wrote {args.out} ({ds.n_samples} samples)")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    overrides = _parse_overrides(args.set)
    if args.ablation is not None:
        ablation = "attention_backbone" if args.ablation == "attention" else args.ablation
        overrides["model.ablation"] = ablation
    if args.mode is not None:
        overrides["train.mode"] = args.mode
    sections = resolve_config(args.preset, args.config, overrides)
    mcfg, tcfg = sections["model"], sections["train"]
    tcfg = dataclasses.replace(tcfg, seed=args.seed)

    train_data = read_csid(args.data)
    _check_data_matches_model(train_data, mcfg, args.data)
    inputs = {args.data: None}
    val_data = None
    if args.val_data:
        val_data = read_csid(args.val_data)
        _check_data_matches_model(val_data, mcfg, args.val_data)
        inputs[args.val_data] = None

    state = init_model(mcfg, seed=args.seed)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    outs = _Outputs()
    try:
        best, history = train(state, train_data, val_data, tcfg, log=log)
        save_state(best, outs.add(args.out))
        history_path = outs.add(str(args.out) + ".history.csv")
        history.write_csv(history_path)
        outs.add(
            _write_manifest(
                args.out, "train", args.seed, _config_dict(sections), inputs, started,
                extra={
                    "best_epoch": history.best_epoch,
                    "best_val_nmse": None if val_data is None else history.best_val_nmse,
                    "n_parameters": best.n_parameters(),
                    "history_csv": history_path,
                },
            )
        )
    except BaseException:
        outs.cleanup()
        raise
    print(f"wrote {args.out} ({best.n_parameters()} parameters)")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    state = load_state(args.model)
    data = read_csid(args.data)
    _check_data_matches_model(data, state.config, args.data)
    grid = _parse_grid(args.grid) if args.grid else None
    stem, ext = os.path.splitext(str(args.out))
    methods = [("cpmamba", state, args.out)]
    if not args.no_baselines:
        methods += [
            ("np", baseline_np, f"{stem}_np{ext or '.csv'}"),
            ("linear", baseline_linear, f"{stem}_linear{ext or '.csv'}"),
        ]
    outs = _Outputs()
    try:
        reports = {}
        for name, model, path in methods:
            rep = evaluate(
                model,
                data,
                args.axis,
                state.config.history_len,
                state.config.horizon,
                grid=grid,
                mode=args.mode,
                eval_snr_db=None if args.eval_snr_db == "none" else float(args.eval_snr_db),
                seed=args.seed,
                workers=_threads(),
            )
            rep.write_csv(outs.add(path))
            reports[name] = rep
        for name, _, path in methods:
            rep = reports[name]
            outs.add(
                _write_manifest(
                    path, "eval", args.seed,
                    {"model": state.config.to_dict()}, {args.model: None, args.data: None},
                    started,
                    extra={"axis": args.axis, "method": name, "mean_nmse": rep.mean_nmse},
                )
            )
    except BaseException:
        outs.cleanup()
        raise
    for name, _, path in methods:
        print(f"{name}: mean NMSE {reports[name].mean_nmse:.5f} -> {path}")
    return 0


def _bench_stack(ablation: str, seq_len: int, d_model: int, batch: int, repeats: int, seed: int):
    from .model import attention_backbone, rmamba_stack

    cfg = ModelConfig(
        history_len=seq_len,
        k_sub=4,
        d_model=d_model,
        n_mamba=2,
        n_res=1,
        conv_channels=4,
        se_reduction=2,
        ablation=ablation,
        dropout_p=0.0,
    )
    st = init_model(cfg, seed=seed)
    x = Tensor(stream(seed, 90, seq_len).standard_normal((batch, seq_len, d_model)))
    runner = attention_backbone if ablation == "attention_backbone" else rmamba_stack
    runner(x, st.blocks, cfg, False, None)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        runner(x, st.blocks, cfg, False, None)
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    lens = [int(v) for v in args.seq_lens.split(",")]
    if len(lens) < 2:
        raise ConfigError("bench needs at least two sequence lengths")
    rows = []
    for ablation, label in (("none", "mamba"), ("attention_backbone", "attention")):
        for seq_len in lens:
            best = _bench_stack(ablation, seq_len, args.d_model, args.batch, args.repeats, args.seed)
            per_token = best / (seq_len * args.batch)
            rows.append((label, seq_len, args.batch, args.d_model, args.repeats, best, per_token))
            if not args.quiet:
                print(f"{label:9s} L={seq_len:5d}  {best * 1e3:8.2f} ms  {per_token * 1e6:7.3f} us/token")
    outs = _Outputs()
    try:
        with open(outs.add(args.out), "w") as fh:
            fh.write("backbone,seq_len,batch,d_model,repeats,best_s,per_token_s\n")
            for label, seq_len, batch, dm, reps, best, per_token in rows:
                fh.write(f"{label},{seq_len},{batch},{dm},{reps},{best:.6e},{per_token:.6e}\n")
    except BaseException:
        outs.cleanup()
        raise
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cpmamba",
        description="Channel prediction pipeline: synthetic MIMO-OFDM data, "
        "selective state-space model training, evaluation sweeps and benchmarks.",
    )
    p.add_argument("--version", action="version", version=f"cpmamba {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a CSID dataset split")
    g.add_argument("--preset", choices=_PRESETS, default="desk", help="base configuration preset")
    g.add_argument("--config", help="JSON config file overriding the preset")
    g.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                   help="single-field override, repeatable")
    g.add_argument("--split", choices=("train", "val", "test"), required=True, help="dataset split")
    g.add_argument("--seed", type=int, default=0, help="generation seed")
    g.add_argument("--out", required=True, help="output .csid path")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write the best checkpoint")
    t.add_argument("--preset", choices=_PRESETS, default="desk", help="base configuration preset")
    t.add_argument("--config", help="JSON config file overriding the preset")
    t.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                   help="single-field override, repeatable")
    t.add_argument("--data", required=True, help="training .csid file")
    t.add_argument("--val-data", help="validation .csid file (best-checkpoint selection)")
    t.add_argument("--mode", choices=("tdd", "fdd"), help="duplexing mode (default from config)")
    t.add_argument("--ablation", choices=("none", "no_se", "no_patch", "attention"),
                   help="architecture ablation variant")
    t.add_argument("--seed", type=int, default=0, help="training seed")
    t.add_argument("--quiet", action="store_true", help="suppress per-epoch logging")
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="sweep NMSE/RMSE/MAE over speed or SNR")
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="test .csid file")
    e.add_argument("--axis", choices=("speed", "snr"), required=True, help="sweep axis")
    e.add_argument("--grid", metavar="LO:HI:STEP", help="condition grid (default: data speeds / 0:25:5)")
    e.add_argument("--mode", choices=("tdd", "fdd"), default="tdd", help="duplexing mode")
    e.add_argument("--eval-snr-db", default="15", metavar="DB|none",
                   help="input SNR for speed sweeps (default 15, 'none' = noiseless)")
    e.add_argument("--no-baselines", action="store_true", help="skip NP and linear baseline files")
    e.add_argument("--seed", type=int, default=0, help="evaluation noise seed")
    e.add_argument("--out", required=True, help="output CSV path (baselines get _np/_linear suffixes)")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="forward-time scaling of the two backbones")
    b.add_argument("--seq-lens", default="128,256,512,1024", help="comma-separated sequence lengths")
    b.add_argument("--d-model", type=int, default=64, help="model width")
    b.add_argument("--batch", type=int, default=1, help="benchmark batch size")
    b.add_argument("--repeats", type=int, default=5, help="timing repeats (best is kept)")
    b.add_argument("--seed", type=int, default=0, help="weight init seed")
    b.add_argument("--quiet", action="store_true", help="suppress per-point output")
    b.add_argument("--out", required=True, help="output CSV path")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CpmambaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
