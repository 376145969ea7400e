from .samples import read_manifest, read_split


def build_dataset(manifest_path, duration_ms, split_path=None):
    """Aligned per-kind sample sets of one duration, with their split when a split file is given."""
    sets = read_manifest(manifest_path, duration_ms)
    if split_path is None:
        return sets, None
    keys = next(iter(sets.values())).keys
    return sets, read_split(split_path, keys)
