"""Small models used by the bundled configurations and the test-suite.

``demo.macro`` and ``demo.micro`` form the classic two-scale loop: every
macro step hands a value to the micro model, which runs a full pass with it
and feeds its result back. The micro model restarts for as long as the
macro keeps sending.
"""

from __future__ import annotations

import numpy as np

from .codec import Payload
from .kernel import Mapper, Sink, Source, Submodel, register_impl


@register_impl("demo.macro")
class Macro(Submodel):
    def init(self, t0, ports):
        self.state = float(ports.params.get("initial", "1.0"))
        self.history: list[float] = []

    def intermediate_observation(self, t, ports):
        ports.send("macroscopicVariable", Payload.f64([self.state]), t)

    def solve_step(self, t, dt, ports):
        feedback, _ = ports.receive("feedback")
        self.state = 0.5 * (self.state + float(feedback.elements[0]))
        self.history.append(self.state)

    def final_observation(self, t, ports):
        self.result = list(self.history)


@register_impl("demo.micro")
class Micro(Submodel):
    restart_port = "environmentValue"

    def init(self, t0, ports):
        env, self.t_env = ports.receive("environmentValue")
        self.target = float(env.elements[0])
        self.x = 0.0
        self.passes = getattr(self, "passes", 0) + 1

    def solve_step(self, t, dt, ports):
        self.x += 0.1 * (self.target - self.x)

    def final_observation(self, t, ports):
        value = Payload.f64([self.x])
        ports.send("result", value, self.t_env + t)
        if ports.connected("trace"):
            ports.send("trace", value, self.t_env + t)
        self.result = self.passes


@register_impl("demo.scale")
class Scale(Mapper):
    """Multiplies every float payload by param ``factor``."""

    def activate(self, inputs, ports):
        factor = float(ports.params.get("factor", "1"))
        for payload, t in inputs.values():
            ports.send("out", Payload.f64(payload.elements * factor), t)


@register_impl("demo.monitor")
class Monitor(Sink):
    def __init__(self):
        self.result: list[tuple[str, float, list]] = []

    def consume(self, port, payload, t, ports):
        self.result.append((port, t, np.asarray(payload.elements).tolist()))


@register_impl("demo.counter")
class Counter(Source):
    """Emits ``count`` int64 values 0..count-1 on port ``out`` at t=i."""

    def produce(self, ports):
        for i in range(int(ports.params.get("count", "10"))):
            yield "out", Payload.i64([i]), float(i)
