"""Few-shot medical image segmentation with regional prototypes.

Thin wrapper over the compiled ``_pami`` extension. Arrays are numpy; masks
may be any numeric dtype (nonzero is foreground).
"""

import json

try:
    from ._pami import *  # noqa: F401,F403
    from ._pami import Trainer, default_train_config, run_cli
except ImportError:  # build tree: extension sits next to the package
    from _pami import *  # noqa: F401,F403
    from _pami import Trainer, default_train_config, run_cli


def train_config(**overrides):
    """Default training configuration as a dict, with keyword overrides."""
    cfg = json.loads(default_train_config())
    unknown = set(overrides) - set(cfg)
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    cfg.update(overrides)
    return cfg


def make_trainer(data, **overrides):
    return Trainer(data, json.dumps(train_config(**overrides)))


def cli(*args):
    """Run the command-line tool in-process and return (code, stdout, stderr)."""
    return run_cli([str(a) for a in args])
