"""
Command-line entry point of the pipeline.

    python -m birdid.main <command> [--out DIR] [--config_file FILE] [--key value ...]

Commands run the stages in order (synth, segment, spectrogram, dataset,
train, eval) or all at once (grid); report redraws the plots of a run.
Any configuration key can be overridden as `--key value`.
"""
import argparse
import glob
import json
import multiprocessing
import os
import shutil
import sys

import torch
from tqdm import tqdm

from birdid.config import config_matches, parse_overrides, resolve_config, save_config
from birdid.datasets import build_dataset
from birdid.datasets.audio import default_synth_spec, load_wav, read_corpus_manifest, synth_corpus
from birdid.datasets.preprocess import (frame_energies, frame_length, frame_signal, hop_length, pre_emphasize,
                                        preprocess_clip, read_segments, write_segments)
from birdid.datasets.samples import (SampleEntry, SampleSet, check_alignment, class_weights, read_manifest,
                                     split_dataset, write_manifest, write_split)
from birdid.datasets.tfr import (KINDS, build_chirplet_dictionary, chirplet_spectrogram, mel_spectrogram,
                                 render_image, save_image, save_spectrogram, stft_spectrogram, window_spectrogram)
from birdid.eval import evaluate, read_grid_summary, read_history, write_grid_summary, write_report
from birdid.models import build_model
from birdid.models.fusion import (CHANNEL_ARGS, CHANNELS, MODEL_IDS, build_feature_bank, load_bundle,
                                  model_dir_name, save_bundle, split_fingerprint)
from birdid.util.errors import BirdIdError, ConfigError, DatasetError, ProtocolError
from birdid.util.misc import fix_seeds
from birdid.util.plot_utils import plot_grid, plot_history

# configuration keys the outputs of each stage depend on, cumulative along the pipeline
CORPUS_KEYS = ("seed", "sample_rate", "num_classes", "clips_per_class", "clip_seconds", "noise_level", "syllable_ms",
               "max_syllables", "corpus_manifest")
SEGMENT_KEYS = CORPUS_KEYS + ("preemphasis", "frame_ms", "overlap", "high_factor", "low_factor", "min_frames",
                              "merge_gap")
SPECTROGRAM_KEYS = SEGMENT_KEYS + ("fft_size", "num_mel_filters", "mel_floor", "chirplet_channels", "chirplet_rates",
                                   "chirplet_span", "chirplet_octaves", "chirplet_fmin", "durations", "window_mode")
DATASET_KEYS = SPECTROGRAM_KEYS + ("split_ratios", "split_by_clip")
MODEL_KEYS = tuple(k for k in DATASET_KEYS if k != "durations") + (
    "backbone_widths", "features_dir", "hidden_dims", "feature_norm", "weight_mode", "batch_size", "lr", "epochs")


def get_args(argv=None):
    parent = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parent.add_argument('--out', default='run', help="Run directory holding every artifact")
    parent.add_argument('--config_file', help="JSON config overriding the packaged defaults")

    parser = argparse.ArgumentParser(prog="birdid", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter, allow_abbrev=False)
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True
    sub.add_parser('synth', parents=[parent], allow_abbrev=False, help="Render the synthetic corpus")
    sub.add_parser('segment', parents=[parent], allow_abbrev=False, help="Find syllables in every clip")
    sub.add_parser('spectrogram', parents=[parent], allow_abbrev=False,
                   help="Render windowed spectrogram images of every kind and duration")
    sub.add_parser('dataset', parents=[parent], allow_abbrev=False, help="Split the samples of every duration")
    for name, help_text in (('train', "Train one model"), ('eval', "Evaluate a trained model")):
        p = sub.add_parser(name, parents=[parent], allow_abbrev=False, help=help_text)
        p.add_argument('model_pos', nargs='?', choices=MODEL_IDS, metavar='model')
        p.add_argument('--model', choices=MODEL_IDS)
        p.add_argument('--channel', choices=sorted(CHANNEL_ARGS), default='ch',
                       help="Spectrogram channel of a tf model")
        p.add_argument('--duration', type=int, help="Window duration in ms (default: first configured)")
        if name == 'eval':
            p.add_argument('--split', choices=['val', 'test'], default='test')
    p = sub.add_parser('grid', parents=[parent], allow_abbrev=False,
                       help="Every model x channel x duration, summarized in grid/summary.csv")
    p.add_argument('--jobs', type=int, default=1, help="Durations trained concurrently")
    sub.add_parser('report', parents=[parent], allow_abbrev=False, help="Plot histories and the grid summary")

    cmd_args, extra = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extra)
    except argparse.ArgumentTypeError as e:
        parser.error(str(e))
    return cmd_args, overrides


def run_path(args, *parts):
    return os.path.join(args.out, *parts)


def corpus_manifest_path(args):
    return args.corpus_manifest or run_path(args, "corpus", "manifest.csv")


def load_corpus(args):
    """(clip_id, wav path, label) rows; clip ids are file names without extension."""
    path = corpus_manifest_path(args)
    if not os.path.exists(path):
        raise DatasetError("no corpus manifest at {}, run synth first or set corpus_manifest".format(path))
    rows = []
    seen = set()
    for wav, label in read_corpus_manifest(path):
        clip_id = os.path.splitext(os.path.basename(wav))[0]
        if clip_id in seen:
            raise DatasetError("{}: clip id '{}' appears twice".format(path, clip_id))
        seen.add(clip_id)
        rows.append((clip_id, wav, label))
    return rows


def run_synth(args):
    spec = default_synth_spec(num_classes=args.num_classes, clips_per_class=args.clips_per_class,
                              clip_seconds=args.clip_seconds, noise_level=args.noise_level, seed=args.seed,
                              syllable_ms=tuple(args.syllable_ms), max_syllables=args.max_syllables,
                              sample_rate=args.sample_rate)
    rows = synth_corpus(spec, run_path(args, "corpus"))
    save_config(args, run_path(args, "corpus", "config.json"))
    print("wrote {} clips of {} classes to {}".format(len(rows), spec.num_classes, run_path(args, "corpus")))


def run_segment(args):
    rows = []
    for clip_id, wav, _ in tqdm(load_corpus(args), desc="segment", disable=not args.verbose):
        clip = load_wav(wav, expected_rate=args.sample_rate, source_id=clip_id)
        _, _, syllables = preprocess_clip(clip, args)
        if not syllables:
            print("*** WARNING: no syllable found in '{}'".format(clip_id))
        rows.extend((clip_id, s) for s in syllables)
    write_segments(rows, run_path(args, "segments", "segments.csv"))
    save_config(args, run_path(args, "segments", "config.json"))
    print("found {} syllables".format(len(rows)))


def compute_spectrograms(frames, args, dictionary):
    fft_size = args.fft_size or None
    return {
        "Spe": stft_spectrogram(frames, fft_size),
        "Mel": mel_spectrogram(frames, args.num_mel_filters, fft_size, args.mel_floor),
        "Ch": chirplet_spectrogram(frames, dictionary),
    }


def run_spectrogram(args):
    segments_path = run_path(args, "segments", "segments.csv")
    if not os.path.exists(segments_path):
        raise DatasetError("no segments at {}, run segment first".format(segments_path))
    corpus = load_corpus(args)
    class_names = sorted({label for _, _, label in corpus})
    n = frame_length(args.sample_rate, args.frame_ms)
    segments = read_segments(segments_path, hop_length(n, args.overlap), n)
    dictionary = build_chirplet_dictionary(args.sample_rate, n, args.chirplet_channels, args.chirplet_rates,
                                           args.chirplet_span or None, args.chirplet_fmin, args.chirplet_octaves)

    entries = {(kind, d): [] for kind in KINDS for d in args.durations}
    for clip_id, wav, label in tqdm(corpus, desc="spectrogram", disable=not args.verbose):
        syllables = segments.get(clip_id, [])
        if not syllables:
            continue
        clip = load_wav(wav, expected_rate=args.sample_rate, source_id=clip_id)
        frames = frame_signal(pre_emphasize(clip, args.preemphasis), args.frame_ms, args.overlap)
        energies = frame_energies(frames)
        for kind, spec in compute_spectrograms(frames, args, dictionary).items():
            if args.save_spectrograms:
                save_spectrogram(spec, run_path(args, "spectrograms", kind, clip_id + ".spec"))
            for d in args.durations:
                for segment in window_spectrogram(spec, syllables, d, weights=energies, mode=args.window_mode):
                    image = render_image(segment, clip_id, d)
                    png = run_path(args, "spectrograms", kind, str(d), image.key + ".png")
                    save_image(image, png)
                    entries[(kind, d)].append(SampleEntry(key=image.key, path=png,
                                                          class_index=class_names.index(label), clip_id=clip_id))

    sets = []
    for d in args.durations:
        per_kind = [SampleSet(entries[(kind, d)], class_names, kind, d) for kind in KINDS]
        check_alignment(per_kind)
        sets.extend(per_kind)
        print("{} ms: {} samples per kind".format(d, len(per_kind[0])))
    write_manifest(sets, run_path(args, "spectrograms", "samples.csv"))
    save_config(args, run_path(args, "spectrograms", "config.json"))


def _samples_manifest(args):
    path = run_path(args, "spectrograms", "samples.csv")
    if not os.path.exists(path):
        raise DatasetError("no sample manifest at {}, run spectrogram first".format(path))
    return path


def _split_path(args, duration):
    return run_path(args, "dataset", "split_{}.csv".format(duration))


def run_dataset(args):
    manifest = _samples_manifest(args)
    for d in args.durations:
        reference = read_manifest(manifest, d)[CHANNELS[0]]
        split = split_dataset(reference, args.split_ratios, seed=args.seed, by_clip=args.split_by_clip)
        write_split(split, reference.keys, _split_path(args, d))
        weights = class_weights(reference, args.weight_mode, indices=split.train)
        print("{} ms: train {} / val {} / test {}, class weights {}".format(
            d, len(split.train), len(split.val), len(split.test), [round(w, 4) for w in weights.omega]))
    save_config(args, run_path(args, "dataset", "config.json"))


def load_experiment(args, duration, kinds=CHANNELS):
    split_path = _split_path(args, duration)
    if not os.path.exists(split_path):
        raise DatasetError("no split at {}, run dataset first".format(split_path))
    sets, split = build_dataset(_samples_manifest(args), duration, split_path)
    bank, _ = build_feature_bank({k: sets[k] for k in kinds}, args, verbose=args.verbose)
    return bank, split


def _fresh_dir(path):
    if os.path.isdir(path):
        print("*** WARNING: overwriting {}".format(path))
        shutil.rmtree(path)
    os.makedirs(path)
    return path


def _bundle_dir(args, model_id, channel_id, duration):
    return run_path(args, "models", model_dir_name(model_id, channel_id, duration))


def train_members(args, bank, split, duration, trained=None):
    """Phase-one TF models of result fusion: reuse matching bundles on disk, train the rest."""
    members = dict(trained or {})
    fingerprint = split_fingerprint(bank.keys, split)
    for kind in CHANNELS:
        if kind in members:
            continue
        bundle = _bundle_dir(args, "tf", kind.lower(), duration)
        if os.path.exists(os.path.join(bundle, "bundle.json")) and config_matches(
                os.path.join(bundle, "config.json"), args, MODEL_KEYS):
            try:
                model, _, _, _ = load_bundle(bundle, bank.keys)
            except ProtocolError:
                model = None
            if model is not None and model.split_fingerprint == fingerprint:
                members[kind] = model
                continue
        model, history = build_model("tf", bank, split, args, channel=kind, output_dir=_fresh_dir(bundle),
                                     verbose=args.verbose)
        save_bundle(model, history, bundle, args, split, bank.keys, duration)
        members[kind] = model
    return members


def train_cell(args, model_id, channel, duration, bank, split, members=None):
    channel_id = channel.lower() if model_id == "tf" else "fused"
    bundle = _fresh_dir(_bundle_dir(args, model_id, channel_id, duration))
    if model_id == "re-fuse":
        members = train_members(args, bank, split, duration, members)
    model, history = build_model(model_id, bank, split, args, channel=channel, members=members, output_dir=bundle,
                                 verbose=args.verbose)
    save_bundle(model, history, bundle, args, split, bank.keys, duration)
    return model, history


def _cli_model(args):
    model_id = args.model or args.model_pos or "tf"
    duration = args.duration if args.duration is not None else args.durations[0]
    if duration not in args.durations:
        raise ConfigError("durations", "{} ms is not a configured duration".format(duration))
    return model_id, CHANNEL_ARGS[args.channel], duration


def run_train(args):
    model_id, channel, duration = _cli_model(args)
    kinds = (channel,) if model_id == "tf" else CHANNELS
    bank, split = load_experiment(args, duration, kinds)
    _, history = train_cell(args, model_id, channel, duration, bank, split)
    print("{} {} {} ms: best validation MAP {:.4f} at epoch {}".format(
        model_id, args.channel, duration, history.best_map, history.best_epoch))


def _report_path(args, report):
    return run_path(args, "reports", "{}_{}_{}_{}.csv".format(report.model, report.channel, report.duration_ms,
                                                              report.split))


def run_eval(args):
    model_id, channel, duration = _cli_model(args)
    channel_id = channel.lower() if model_id == "tf" else "fused"
    bundle = _bundle_dir(args, model_id, channel_id, duration)
    if not os.path.exists(os.path.join(bundle, "bundle.json")):
        raise DatasetError("no trained model at {}, run train first".format(bundle))
    kinds = (channel,) if model_id == "tf" else CHANNELS
    bank, _ = load_experiment(args, duration, kinds)
    model, _, split, _ = load_bundle(bundle, bank.keys)
    report = evaluate(model, bank, split, args.split, duration)
    write_report(report, _report_path(args, report))
    print("{} {} {} ms {} MAP {:.4f}".format(report.model, report.channel, duration, args.split, report.map))


def grid_duration(args, duration):
    """Every configured model of one duration on one shared feature bank; returns summary rows."""
    fix_seeds(args.seed)
    bank, split = load_experiment(args, duration)
    rows = []

    def record(model):
        report = evaluate(model, bank, split, "test", duration)
        write_report(report, _report_path(args, report))
        rows.append((report.model, report.channel, duration, report.map))

    tf_models = {}
    if "tf" in args.grid_models:
        for channel in args.grid_channels:
            kind = CHANNEL_ARGS[channel]
            tf_models[kind], _ = train_cell(args, "tf", kind, duration, bank, split)
            record(tf_models[kind])
    if "fe-fuse" in args.grid_models:
        model, _ = train_cell(args, "fe-fuse", "fused", duration, bank, split)
        record(model)
    if "re-fuse" in args.grid_models:
        model, _ = train_cell(args, "re-fuse", "fused", duration, bank, split, members=tf_models)
        record(model)
    return rows


def _init_worker():
    # one thread per cell keeps every cell's arithmetic order fixed
    torch.set_num_threads(1)


GRID_STAGES = (
    ("corpus", CORPUS_KEYS, run_synth),
    ("segments", SEGMENT_KEYS, run_segment),
    ("spectrograms", SPECTROGRAM_KEYS, run_spectrogram),
    ("dataset", DATASET_KEYS, run_dataset),
)


def prepare_stages(args):
    """
    Run every data stage whose saved config disagrees with args on the keys
    it depends on, and every stage after it; current stages are reused.
    """
    rebuild = False
    for stage, keys, runner in GRID_STAGES:
        if stage == "corpus" and args.corpus_manifest:
            continue
        rebuild = rebuild or not config_matches(run_path(args, stage, "config.json"), args, keys)
        if not rebuild:
            continue
        if os.path.isdir(run_path(args, stage)):
            print("*** WARNING: {} was built with another config, rebuilding it".format(run_path(args, stage)))
            shutil.rmtree(run_path(args, stage))
        runner(args)


def run_grid(args):
    prepare_stages(args)

    if args.jobs > 1 and len(args.durations) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(min(args.jobs, len(args.durations)), initializer=_init_worker) as pool:
            results = pool.starmap(grid_duration, [(args, d) for d in args.durations])
    else:
        results = [grid_duration(args, d) for d in args.durations]
    rows = [row for cell in results for row in cell]
    summary = write_grid_summary(rows, run_path(args, "grid", "summary.csv"))
    plot_grid(summary, run_path(args, "reports", "grid.png"))
    print(summary.to_string(index=False))


def run_report(args):
    by_duration = {}
    for meta_path in sorted(glob.glob(run_path(args, "models", "*", "bundle.json"))):
        with open(meta_path) as f:
            meta = json.load(f)
        history = read_history(os.path.join(os.path.dirname(meta_path), "history.csv"))
        label = "{} {}".format(meta["model"], meta["channel"])
        by_duration.setdefault(meta["duration_ms"], {})[label] = history
    for duration, histories in sorted(by_duration.items()):
        plot_history(histories, run_path(args, "reports", "history_{}.png".format(duration)),
                     title="Validation MAP, {} ms windows".format(duration))
    summary_path = run_path(args, "grid", "summary.csv")
    if os.path.exists(summary_path):
        summary = read_grid_summary(summary_path)
        plot_grid(summary, run_path(args, "reports", "grid.png"))
        print(summary.to_string(index=False))
    if not by_duration and not os.path.exists(summary_path):
        raise DatasetError("nothing to report under {}".format(args.out))


COMMANDS = {
    'synth': run_synth,
    'segment': run_segment,
    'spectrogram': run_spectrogram,
    'dataset': run_dataset,
    'train': run_train,
    'eval': run_eval,
    'grid': run_grid,
    'report': run_report,
}


def main(argv=None):
    cmd_args, overrides = get_args(argv)
    try:
        args = resolve_config(cmd_args.config_file, overrides)
        for key, value in vars(cmd_args).items():
            setattr(args, key, value)
        if args.verbose:
            print(json.dumps({k: v for k, v in sorted(vars(args).items())}))
            print('-' * 100)
        fix_seeds(args.seed)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args)
        save_config(args, run_path(args, "config.json"))
    except ConfigError as e:
        print("config error: {}".format(e), file=sys.stderr)
        return e.exit_code
    except BirdIdError as e:
        print("error: {}".format(e), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print("error: {}".format(e), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
