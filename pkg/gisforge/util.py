from contextlib import contextmanager
from multiprocessing.process import BaseProcess
from typing import IO, Any, Iterator, List, Sequence, TypeVar
import json
import os
import queue
import string
import tempfile

_formatter = string.Formatter()

T = TypeVar('T')


def _escape(text: str) -> str:
    return text.replace('{', '{{').replace('}', '}}')


def partial_format(format_string: str, **kwargs: object) -> str:
    """Fill the named fields given in `kwargs` and leave the others in place.

    The result is again a format string. The log tracer fills in the level
    and scope once per trace function and the step for every emitted line.
    Fields are matched by their full name, so positional fields and
    attribute or index lookups are always left for later.

    """
    pieces = []
    for literal, field, spec, conversion in _formatter.parse(format_string):
        pieces.append(_escape(literal))
        if field is None:
            continue
        if spec:
            spec = partial_format(spec, **kwargs)
        field_str = ''.join(
            [field, f'!{conversion}' if conversion else '', f':{spec}' if spec else '']
        )
        if field in kwargs:
            pieces.append(_escape(('{' + field_str + '}').format(**kwargs)))
        else:
            pieces.append('{' + field_str + '}')
    return ''.join(pieces)


@contextmanager
def atomic_open(path: str, mode: str = 'w') -> Iterator[IO[Any]]:
    """Open a temporary sibling of `path` that replaces `path` on success.

    Readers never observe a partially written file: the content only appears
    under `path` once the ``with`` block exits without an exception.

    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(
        prefix=f'.{os.path.basename(path)}.', suffix='.tmp', dir=directory
    )
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_json(path: str, obj: Any) -> None:
    """Atomically write `obj` as JSON with sorted keys."""
    with atomic_open(path) as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path: str) -> Any:
    with open(path) as f:
        return json.load(f)


class WorkerError(RuntimeError):
    """A worker process exited before delivering all of its results."""


def gather(
    results: Any, count: int, workers: Sequence[BaseProcess], poll: float = 1.0
) -> List[T]:
    """Collect `count` items from the `results` queue filled by `workers`.

    The queue is polled every `poll` seconds so that a worker killed outside
    Python (signal, segfault, OOM) is noticed instead of blocking forever.

    :raises WorkerError: When a worker dies, or all workers have exited with
        results still missing.

    """
    items: List[T] = []
    while len(items) < count:
        try:
            items.append(results.get(timeout=poll))
            continue
        except queue.Empty:
            pass
        for worker in workers:
            if worker.exitcode not in (None, 0):
                raise WorkerError(
                    f'{worker.name} died with exit code {worker.exitcode}; '
                    f'{count - len(items)} of {count} results missing'
                )
        if not any(worker.is_alive() for worker in workers):
            try:
                items.append(results.get(timeout=poll))
            except queue.Empty:
                raise WorkerError(
                    f'workers exited with {count - len(items)} of {count} '
                    f'results missing'
                )
    return items
