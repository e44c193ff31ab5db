"""Desk-scale cognitive imaging pipeline simulator.

Library layout:

- ``core``      shared numerics: frames, time series, RNG streams, metrics
- ``reservoir`` echo-state network filtering / channel equalization
- ``spatial``   convolutional classifier + region search -> spatial tuples
- ``temporal``  scalar encoder + temporal memory sequence prediction
- ``hardware``  digital / stochastic / crossbar neuron emulation
- ``pipeline``  scene synthesis, channel models, stage orchestration
- ``cli``       command line entry points
"""

from neurocam.core import Frame, TimeSeries, RngStream, nrmse

__all__ = ["Frame", "TimeSeries", "RngStream", "nrmse"]
