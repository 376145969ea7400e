"""
Run configuration: packaged defaults, an optional JSON config file and
`--key value` command-line overrides, validated before any work starts.
"""
import argparse
import copy
import json
import os

from birdid.datasets.preprocess import frame_length, hop_length
from birdid.util.errors import ConfigError

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config.json")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def load_defaults():
    with open(DEFAULT_CONFIG_PATH) as f:
        return json.load(f)


def _cast(key, value, default):
    """Cast a command-line string (or JSON value) to the type of the default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, list):
            items = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
            element = default[0] if default else ""
            return [_cast(key, v.strip() if isinstance(v, str) else v, element) for v in items]
        if isinstance(default, int):
            if isinstance(value, int) or (isinstance(value, str) and value.strip().lstrip("-").isdigit()):
                return int(value)
            number = float(value)
            if not number.is_integer():
                raise ValueError(value)
            return int(number)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, "cannot read {!r} as {}".format(value, type(default).__name__))


def parse_overrides(tokens):
    """['--key', 'value', ...] -> {key: 'value'}; a malformed list is a usage error."""
    overrides = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or i + 1 >= len(tokens):
            raise argparse.ArgumentTypeError("expected --key value pairs, got '{}'".format(token))
        overrides[token[2:].replace("-", "_")] = tokens[i + 1]
        i += 2
    return overrides


def resolve_config(config_file=None, overrides=None) -> argparse.Namespace:
    """defaults <- config_file <- overrides, each value cast to the default's type."""
    defaults = load_defaults()
    config = copy.deepcopy(defaults)
    layers = []
    if config_file:
        try:
            with open(config_file) as f:
                layers.append(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("config_file", "cannot read {}: {}".format(config_file, e))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in defaults:
                raise ConfigError(key, "unknown configuration key")
            config[key] = _cast(key, value, defaults[key])
    args = argparse.Namespace(**config)
    validate(args)
    return args


def _require(condition, key, message):
    if not condition:
        raise ConfigError(key, message)


def validate(args):
    """Check every value against the preconditions of the stage that consumes it."""
    _require(args.sample_rate > 0, "sample_rate", "must be positive")
    _require(args.num_classes >= 1, "num_classes", "must be >= 1")
    _require(args.clips_per_class >= 1, "clips_per_class", "must be >= 1")
    _require(args.clip_seconds > 0, "clip_seconds", "must be positive")
    _require(args.noise_level >= 0, "noise_level", "must be >= 0")
    _require(len(args.syllable_ms) == 2 and 50 <= args.syllable_ms[0] <= args.syllable_ms[1] <= 400,
             "syllable_ms", "must be two durations lo <= hi within [50, 400] ms")
    _require(args.syllable_ms[1] / 1000.0 <= args.clip_seconds, "syllable_ms", "longest syllable exceeds the clip")
    _require(args.max_syllables >= 1, "max_syllables", "must be >= 1")

    _require(0.0 <= args.preemphasis < 1.0, "preemphasis", "must lie in [0, 1)")
    _require(0.0 <= args.overlap < 1.0, "overlap", "must lie in [0, 1)")
    _require(args.frame_ms > 0, "frame_ms", "must be positive")
    n = frame_length(args.sample_rate, args.frame_ms)
    hop = hop_length(n, args.overlap)
    _require(n >= 1 and hop >= 1, "frame_ms", "gives an empty frame or hop")
    _require(args.low_factor > 0, "low_factor", "must be positive")
    _require(args.high_factor >= args.low_factor, "high_factor", "must be >= low_factor")
    _require(args.min_frames >= 1, "min_frames", "must be >= 1")
    _require(args.merge_gap >= 0, "merge_gap", "must be >= 0")

    if args.fft_size:
        _require(args.fft_size >= n and args.fft_size & (args.fft_size - 1) == 0, "fft_size",
                 "must be 0 (auto) or a power of two >= the frame length {}".format(n))
    _require(args.num_mel_filters >= 32, "num_mel_filters", "must be >= 32")
    _require(args.mel_floor > 0, "mel_floor", "must be positive")
    _require(args.chirplet_channels >= 1, "chirplet_channels", "must be >= 1")
    _require(args.chirplet_rates >= 1 and args.chirplet_rates % 2 == 1, "chirplet_rates", "must be odd")
    _require(args.chirplet_span >= 0, "chirplet_span", "must be >= 0 (0 selects the octave rule)")
    _require(args.chirplet_octaves > 0, "chirplet_octaves", "must be positive")
    _require(0 < args.chirplet_fmin < 0.225 * args.sample_rate, "chirplet_fmin",
             "must lie below 0.45 x Nyquist")
    _require(len(args.durations) >= 1, "durations", "needs at least one duration")
    for d in args.durations:
        _require(int(round(d / 1000.0 * args.sample_rate / hop)) >= 1, "durations",
                 "{} ms is shorter than one frame hop".format(d))
    _require(args.window_mode in ("centroid", "tile"), "window_mode", "must be centroid or tile")

    _require(len(args.split_ratios) == 3 and min(args.split_ratios) >= 0
             and abs(sum(args.split_ratios) - 1.0) <= 1e-9, "split_ratios",
             "must be three non-negative values summing to 1")
    _require(args.weight_mode in ("inverse_frequency", "uniform"), "weight_mode",
             "must be inverse_frequency or uniform")
    _require(len(args.backbone_widths) >= 1 and min(args.backbone_widths) >= 1, "backbone_widths",
             "must list positive conv widths")
    _require(len(args.hidden_dims) == 2 and min(args.hidden_dims) >= 1, "hidden_dims",
             "must be two positive sizes")
    _require(args.batch_size >= 1, "batch_size", "must be >= 1")
    _require(args.lr > 0, "lr", "must be positive")
    _require(args.epochs >= 1, "epochs", "must be >= 1")
    _require(args.print_freq >= 1, "print_freq", "must be >= 1")
    _require(args.num_workers >= 0, "num_workers", "must be >= 0")
    _require(set(args.grid_models) <= {"tf", "fe-fuse", "re-fuse"}, "grid_models",
             "must be drawn from tf, fe-fuse, re-fuse")
    _require(set(args.grid_channels) <= {"ch", "mel", "spe"}, "grid_channels", "must be drawn from ch, mel, spe")
    return args


def save_config(args, path):
    """Write the configuration keys of args (command-line extras excluded) as JSON."""
    keys = load_defaults().keys()
    config = {k: getattr(args, k) for k in keys}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(config, f, indent=4, sort_keys=True)
        f.write("\n")


def config_matches(path, args, keys):
    """True when the config saved at path exists and agrees with args on every key."""
    if not os.path.exists(path):
        return False
    try:
        with open(path) as f:
            saved = json.load(f)
    except (OSError, json.JSONDecodeError):
        return False
    return all(k in saved and saved[k] == getattr(args, k) for k in keys)
