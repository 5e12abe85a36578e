"""Run tracers: a human-readable log and a machine-readable metrics record.

A tracer named ``<name>`` reads its settings from ``'run.<name>.*'``: the
``enable`` switch, the output ``file`` (empty for stderr), whether the file
``persist`` after the run, and the ``include_pat``/``exclude_pat`` regular
expressions selecting the scopes it listens to. Components obtain trace
functions through :meth:`TraceManager.get_trace_function()`.

"""
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, TextIO
import json
import math
import os
import re
import sys
import traceback

from .util import partial_format

if TYPE_CHECKING:
    from .runner import RunEnvironment

TraceCallback = Callable[..., None]


class Tracer:
    """Base of the run tracers; owns the output stream and the scope filter."""

    name: str = ''
    default_file: str = ''

    def __init__(self, env: 'RunEnvironment') -> None:
        self.env = env
        config = env.config
        prefix = f'run.{self.name}'
        self.enabled: bool = config.setdefault(f'{prefix}.enable', False)
        self.persist: bool = config.setdefault(f'{prefix}.persist', True)
        self.filename: str = ''
        self.file: Optional[TextIO] = None
        if not self.enabled:
            return
        self._include = [
            re.compile(p) for p in config.setdefault(f'{prefix}.include_pat', ['.*'])
        ]
        self._exclude = [
            re.compile(p) for p in config.setdefault(f'{prefix}.exclude_pat', [])
        ]
        self.filename = config.setdefault(f'{prefix}.file', self.default_file)
        self.configure()
        if self.filename:
            self.file = open(self.filename, self.file_mode(), buffering=1)
        else:
            self.file = sys.stderr

    def configure(self) -> None:
        """Read tracer specific settings; called before the file is opened."""

    def file_mode(self) -> str:
        return 'w'

    def is_scope_enabled(self, scope: str) -> bool:
        if not self.enabled:
            return False
        if not any(r.match(scope) for r in self._include):
            return False
        return not any(r.match(scope) for r in self._exclude)

    def activate_trace(self, scope: str, **hints: Any) -> Optional[TraceCallback]:
        raise NotImplementedError()  # pragma: no cover

    def trace_exception(self) -> None:
        pass

    def flush(self) -> None:
        if self.file is not None:
            self.file.flush()

    def close(self) -> None:
        if self.file is not None and self.file is not sys.stderr:
            self.file.close()
        self.file = None
        if self.enabled and not self.persist and self.filename:
            if os.path.isfile(self.filename):
                os.remove(self.filename)


class LogTracer(Tracer):
    """Write leveled text lines prefixed by level, step and scope."""

    name = 'log'
    default_file = 'run.log'
    default_format = '{level:7} {step:>7}: {scope}:'

    levels = {
        'ERROR': 1,
        'WARNING': 2,
        'INFO': 3,
        'RECORD': 4,
        'DEBUG': 5,
    }

    def configure(self) -> None:
        config = self.env.config
        level: str = config.setdefault('run.log.level', 'INFO')
        if level not in self.levels:
            raise ValueError(f'unknown run.log.level: {level}')
        self.max_level = self.levels[level]
        self.format_str: str = config.setdefault('run.log.format', self.default_format)

    def activate_trace(self, scope: str, **hints: Any) -> Optional[TraceCallback]:
        level: str = hints.get('level', 'DEBUG')
        if self.levels[level] > self.max_level or not self.is_scope_enabled(scope):
            return None
        prefix = partial_format(self.format_str, level=level, scope=scope)

        def trace_callback(*value: Any) -> None:
            print(prefix.format(step=self.env.now), *value, file=self.file)

        return trace_callback

    def trace_exception(self) -> None:
        lines = traceback.format_exception(*sys.exc_info())
        header = self.format_str.format(
            level='ERROR', step=self.env.now, scope='Exception'
        )
        print(header, lines[-1], '\n', *lines, file=self.file)


class RecordTracer(Tracer):
    """Append one JSON object per record to a JSON-lines file.

    Each record carries the step at which it was made and the emitting scope
    in addition to the caller's fields. Non-finite floats are written as
    ``null`` so that every line stays valid JSON.

    """

    name = 'records'
    default_file = 'metrics.jsonl'

    def file_mode(self) -> str:
        # Resumed runs continue the existing record.
        return 'a' if self.env.now > 0 else 'w'

    def activate_trace(self, scope: str, **hints: Any) -> Optional[TraceCallback]:
        if not self.is_scope_enabled(scope):
            return None

        def trace_callback(fields: Dict[str, Any]) -> None:
            record = {'step': int(self.env.now), 'scope': scope}
            record.update({k: _jsonable(v) for k, v in fields.items()})
            assert self.file is not None
            self.file.write(json.dumps(record, sort_keys=True) + '\n')

        return trace_callback


def _jsonable(value: Any) -> Any:
    if hasattr(value, 'item') and callable(value.item):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class TraceManager:
    """Own the run's tracers and hand out scoped trace functions."""

    def __init__(self, env: 'RunEnvironment') -> None:
        self.tracers: List[Tracer] = []
        try:
            self.log_tracer = LogTracer(env)
            self.tracers.append(self.log_tracer)
            self.record_tracer = RecordTracer(env)
            self.tracers.append(self.record_tracer)
        except BaseException:
            self.close()
            raise

    def flush(self) -> None:
        for t in self.tracers:
            t.flush()

    def close(self) -> None:
        for t in self.tracers:
            t.close()

    def get_trace_function(self, scope: str, **hints: Any) -> Callable[..., None]:
        """Get a function that emits to every tracer named in `hints`.

        ``get_trace_function(scope, log={'level': 'INFO'})`` returns a
        function logging at INFO level; ``records={}`` routes the call's
        single dict argument to the metrics record. Disabled tracers and
        filtered scopes are resolved here, once.

        """
        callbacks = [
            cb
            for cb in (
                t.activate_trace(scope, **hints[t.name])
                for t in self.tracers
                if t.name in hints and t.enabled
            )
            if cb is not None
        ]

        def trace_function(*value: Any) -> None:
            for cb in callbacks:
                cb(*value)

        return trace_function

    def trace_exception(self) -> None:
        for t in self.tracers:
            if t.enabled:
                t.trace_exception()
