from multiprocessing import Process, Queue
import os

import pytest

from gisforge.util import (
    WorkerError,
    atomic_open,
    gather,
    partial_format,
    read_json,
    write_json,
)


@pytest.mark.parametrize(
    'expected, format_str, kwargs',
    [
        ('abc', 'abc', {}),
        ('aBc', 'a{b}c', {'b': 'B'}),
        ('a{b!r}c', 'a{b!r}c', {}),
        ("a'B'c", 'a{b!r}c', {'b': 'B'}),
        (
            'INFO    {step:>7}: top:',
            '{level:7} {step:>7}: {scope}:',
            {'level': 'INFO', 'scope': 'top'},
        ),
    ],
)
def test_partial_format(expected, format_str, kwargs):
    assert expected == partial_format(format_str, **kwargs)


def test_write_json_sorted(tmpdir):
    path = str(tmpdir.join('doc.json'))
    write_json(path, {'b': 1, 'a': [1, 2]})
    assert read_json(path) == {'a': [1, 2], 'b': 1}
    with open(path) as f:
        text = f.read()
    assert text.index('"a"') < text.index('"b"')
    assert os.listdir(str(tmpdir)) == ['doc.json']


def test_atomic_open_keeps_old_content_on_failure(tmpdir):
    path = str(tmpdir.join('doc.txt'))
    with atomic_open(path) as f:
        f.write('old')
    with pytest.raises(RuntimeError):
        with atomic_open(path) as f:
            f.write('partial')
            raise RuntimeError('interrupted')
    with open(path) as f:
        assert f.read() == 'old'
    assert os.listdir(str(tmpdir)) == ['doc.txt']


def test_atomic_open_binary(tmpdir):
    path = str(tmpdir.join('blob.bin'))
    with atomic_open(path, 'wb') as f:
        f.write(b'\x00\x01')
    with open(path, 'rb') as f:
        assert f.read() == b'\x00\x01'


def _exit_with(code):
    os._exit(code)


def _put(q, value):
    q.put(value)


def test_gather():
    q = Queue()
    workers = [Process(target=_put, args=(q, i)) for i in range(3)]
    for worker in workers:
        worker.start()
    assert sorted(gather(q, 3, workers, poll=0.1)) == [0, 1, 2]
    for worker in workers:
        worker.join()


def test_gather_dead_worker():
    worker = Process(target=_exit_with, args=(9,), name='doomed')
    worker.start()
    with pytest.raises(WorkerError) as e:
        gather(Queue(), 1, [worker], poll=0.1)
    assert 'doomed died with exit code 9' in str(e.value)


def test_gather_workers_done_early():
    worker = Process(target=_exit_with, args=(0,))
    worker.start()
    worker.join()
    with pytest.raises(WorkerError) as e:
        gather(Queue(), 2, [worker], poll=0.1)
    assert '2 of 2 results missing' in str(e.value)
