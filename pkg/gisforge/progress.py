from contextlib import contextmanager
from typing import IO, TYPE_CHECKING, Generator, Optional
import sys
import timeit

import simpy

try:
    import progressbar
except ImportError:
    progressbar = None

if TYPE_CHECKING:
    from .runner import RunEnvironment


@contextmanager
def standalone_progress_manager(env: 'RunEnvironment') -> Generator[None, None, None]:
    """Display step progress on stderr while the run executes.

    A progressbar2 bar is used when stderr is a terminal; otherwise plain
    progress lines are printed about every ``'run.progress.update_period'``
    seconds. Progress requires a bounded run (``env.until`` is set).

    """
    enabled: bool = env.config.setdefault('run.progress.enable', False)
    max_width: int = env.config.setdefault('run.progress.max_width', 0)
    period_s: float = env.config.setdefault('run.progress.update_period', 1.0)

    if not enabled or env.until is None:
        yield None
    elif sys.stderr.isatty() and progressbar:
        pbar = _get_pbar(env, max_width, sys.stderr)
        env.process(_pbar_process(env, pbar, period_s))
        try:
            yield None
        finally:
            pbar.finish()
    else:
        env.process(_display_process(env, period_s, sys.stderr))
        try:
            yield None
        finally:
            _print_progress(env.run_index, env.now, env.until, end='\n', fd=sys.stderr)


def _print_progress(
    run_index: Optional[int], now: float, until: Optional[int], end: str, fd: IO
) -> None:
    parts = []
    if run_index is not None:
        parts.append(f'Run {run_index}')
    parts.append(f'step {now:7.0f}')
    if until:
        parts.append(f'({100 * now / until:.0f}%)')
    print(*parts, end=end, file=fd)
    fd.flush()


def _get_pbar(
    env: 'RunEnvironment', max_width: int, fd: IO
) -> 'progressbar.ProgressBar':
    prefix = '' if env.run_index is None else f'Run {env.run_index} '
    pbar = progressbar.ProgressBar(
        fd=fd,
        min_value=0,
        max_value=env.until,
        initial_value=env.now,
        widgets=[
            prefix,
            progressbar.Counter(format='step %(value)d/%(max_value)d'),
            ' ',
            progressbar.Percentage(),
            ' ',
            progressbar.Bar(),
            ' ',
            progressbar.ETA(),
        ],
    )
    if max_width and pbar.term_width > max_width:
        pbar.term_width = max_width
    return pbar


def _adaptive_interval(
    env: 'RunEnvironment', period_s: float
) -> Generator[simpy.Timeout, None, None]:
    # Sleep a number of steps that approximates the wall-clock period.
    interval = 1.0
    while True:
        t0 = timeit.default_timer()
        yield env.timeout(max(1, round(interval)))
        elapsed = timeit.default_timer() - t0
        if elapsed > 0:
            interval = max(1.0, interval * period_s / elapsed)


def _pbar_process(
    env: 'RunEnvironment', pbar: 'progressbar.ProgressBar', period_s: float
) -> Generator[simpy.Timeout, None, None]:
    for timeout in _adaptive_interval(env, period_s):
        pbar.update(min(env.now, env.until))
        yield timeout


def _display_process(
    env: 'RunEnvironment', period_s: float, fd: IO
) -> Generator[simpy.Timeout, None, None]:
    end = '\r' if fd.isatty() else '\n'
    for timeout in _adaptive_interval(env, period_s):
        _print_progress(env.run_index, env.now, env.until, end=end, fd=fd)
        yield timeout
