from fedlora.config import build_config


def make_cfg(overrides: dict | None = None):
    """Validated ExperimentConfig from dotted-key overrides."""
    pairs = [("test", key, str(value)) for key, value in (overrides or {}).items()]
    return build_config(pairs)
