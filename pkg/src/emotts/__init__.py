"""Emotion-controllable TTS token engine at desk scale.

Subpackages: vocab (joint token space and prompts), model (causal
transformer with grouped audio heads), train (targets, loss, schedule,
gradient checks), decode (greedy generation), toyspeech (deterministic
codec stand-ins), dataset (manifest model and construction pipeline),
metrics / audit (evaluation and the metric-reliability harness), cli.
"""

__version__ = "0.1.0"
