def build_model(model_id, bank, split, args, channel=None, members=None, output_dir=None, verbose=True):
    """Train one model family on a feature bank; returns (model, history)."""
    # fusion imports the engine, which imports .head from this package
    from .fusion import train_fe_fuse, train_re_fuse, train_tf

    if model_id == "tf":
        return train_tf(bank, split, args, channel, output_dir=output_dir, verbose=verbose)
    if model_id == "fe-fuse":
        return train_fe_fuse(bank, split, args, output_dir=output_dir, verbose=verbose)
    if model_id == "re-fuse":
        return train_re_fuse(members, bank, split, args, output_dir=output_dir, verbose=verbose)
    raise ValueError(f'model {model_id} not supported')
