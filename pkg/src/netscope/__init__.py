"""netscope: receptive fields, preferred stimuli and activation maximisation for residual CNNs."""

__version__ = "0.1.0"

from . import actmax, checkpoint, data, graph, mine, probe, rf, tensor, train, vfilter  # noqa: E402,F401
