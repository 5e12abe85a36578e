"""Run machinery shared by training, ablation and experiment harnesses.

Every training run is a simulation: a tree of
:class:`~gisforge.component.Component` instances scheduled by a
:class:`RunEnvironment` whose clock advances one unit per optimisation step.
:func:`run` owns the workspace, the tracers, the result and config dumps
and the exception capture around one such run. :func:`run_factors` and
:func:`run_many` spread independent runs over worker processes.

"""
from contextlib import closing, contextmanager
from multiprocessing import Process, Queue, cpu_count
from typing import (
    TYPE_CHECKING,
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Type,
)
import json
import os
import random
import shutil
import timeit

import simpy
import yaml

from .config import ConfigDict, ConfigFactor, absolutize_paths, factorial_config
from .progress import standalone_progress_manager
from .tracer import TraceManager
from .util import WorkerError, atomic_open, gather

if TYPE_CHECKING:
    from .component import Component  # noqa: F401

ResultDict = Dict[str, Any]


class RunEnvironment(simpy.Environment):
    """Step-clocked :class:`simpy.Environment` carrying the run's context.

    :param dict config: Complete configuration of the run.
    :param int initial_step: Value of :attr:`now` at the start; nonzero when
        a training is resumed from a checkpoint.

    """

    def __init__(self, config: ConfigDict, initial_step: int = 0) -> None:
        super().__init__(initial_time=initial_step)
        self.config = config

        #: :class:`random.Random` seeded from 'run.seed'.
        self.rand = random.Random()
        self.rand.seed(config.setdefault('run.seed', None), version=2)

        #: First step that is not executed. Set by the top component's
        #: ``pre_init()``; None lets the run drain its event queue.
        self.until: Optional[int] = None

        #: Position within a multi-run ('meta.run.index'), None when alone.
        self.run_index: Optional[int] = config.get('meta.run.index')

        self.tracemgr = TraceManager(self)


def _workspace_dir(config: ConfigDict) -> str:
    return config.setdefault(
        'meta.run.workspace', config.setdefault('run.workspace', os.curdir)
    )


@contextmanager
def _in_workspace(config: ConfigDict) -> Iterator[str]:
    """Create the run's workspace if needed and make it the working directory.

    An existing workspace is reused unless 'run.workspace.overwrite' asks for
    it to be emptied first.

    """
    workspace = _workspace_dir(config)
    overwrite = config.setdefault('run.workspace.overwrite', False)
    origin = os.getcwd()
    if os.path.relpath(workspace) != os.curdir:
        if os.path.isdir(workspace):
            if overwrite:
                shutil.rmtree(workspace)
                os.makedirs(workspace)
        else:
            os.makedirs(workspace)
        os.chdir(workspace)
    try:
        yield workspace
    finally:
        os.chdir(origin)


def run(
    config: ConfigDict,
    top_type: Type['Component'],
    env_type: Type[RunEnvironment] = RunEnvironment,
    reraise: bool = True,
    progress_manager=standalone_progress_manager,
) -> ResultDict:
    """Build the component tree of `top_type` and run it to ``env.until``.

    Whatever happens, the exception (or None) is logged and stored under
    ``'run.exception'``, and the config and result files named by
    'run.config.file' and 'run.result.file' are written. The exception then
    propagates unless `reraise` is false.

    :param dict config: Configuration of the run; completed in place.
    :param top_type: Component subclass at the top of the tree.
    :param env_type: :class:`RunEnvironment` subclass to instantiate.
    :param bool reraise: Propagate an exception raised by the run.
    :returns: The result dict composed by the components.

    """
    t0 = timeit.default_timer()
    result: ResultDict = {}
    absolutize_paths(config)
    result_file = config.setdefault('run.result.file', None)
    config_file = config.setdefault('run.config.file', None)
    try:
        start = top_type.initial_step(config)
        with _in_workspace(config):
            env = env_type(config, start)
            tracemgr = env.tracemgr
            with closing(tracemgr):
                try:
                    top_type.pre_init(env)
                    tracemgr.flush()
                    with progress_manager(env):
                        top = top_type(parent=None, env=env)
                        top.elaborate()
                        tracemgr.flush()
                        if env.until is None or env.until > env.now:
                            env.run(until=env.until)
                        tracemgr.flush()
                        top.post_run()
                        tracemgr.flush()
                        top.get_result(result)
                except BaseException as e:
                    tracemgr.trace_exception()
                    result['run.exception'] = repr(e)
                    raise
                else:
                    result['run.exception'] = None
                finally:
                    tracemgr.flush()
                    result.update(
                        {
                            'config': config,
                            'run.now': int(env.now),
                            'run.runtime': timeit.default_timer() - t0,
                        }
                    )
                    _dump_dict(config_file, config)
                    _dump_dict(result_file, result)
    except BaseException as e:
        if reraise:
            raise
        result.setdefault('config', config)
        result.setdefault('run.runtime', timeit.default_timer() - t0)
        if result.get('run.exception') is None:
            result['run.exception'] = repr(e)
    return result


def run_factors(
    base_config: ConfigDict,
    factors: List[ConfigFactor],
    top_type: Type['Component'],
    env_type: Type[RunEnvironment] = RunEnvironment,
    jobs: Optional[int] = None,
    config_filter: Optional[Callable[[ConfigDict], bool]] = None,
) -> List[ResultDict]:
    """Run every combination of `factors` applied to `base_config`.

    Combination ``i`` of the cartesian product gets 'meta.run.index' ``i``
    and the workspace ``<run.workspace>/<i>``, also when `config_filter`
    drops some of the combinations.

    :param dict base_config: Configuration shared by all runs.
    :param list factors: ``(keys, value_lists)`` pairs, see
        :func:`~gisforge.config.factorial_config`.
    :param top_type: Component subclass at the top of each tree.
    :param env_type: :class:`RunEnvironment` subclass to instantiate.
    :param int jobs: Upper bound on worker processes.
    :param config_filter: Keeps the configs for which it returns true.
    :returns: Results sorted by run index.

    """
    absolutize_paths(base_config)
    root = base_config.setdefault('run.workspace', os.curdir)
    overwrite = base_config.setdefault('run.workspace.overwrite', False)
    configs = []
    for index, config in enumerate(
        factorial_config(base_config, factors, 'meta.run.special')
    ):
        config['meta.run.index'] = index
        config['meta.run.workspace'] = os.path.join(root, str(index))
        if config_filter is None or config_filter(config):
            configs.append(config)
    if overwrite and os.path.relpath(root) != os.curdir and os.path.isdir(root):
        shutil.rmtree(root)
    return run_many(configs, top_type, env_type, jobs)


def run_many(
    configs: Sequence[ConfigDict],
    top_type: Type['Component'],
    env_type: Type[RunEnvironment] = RunEnvironment,
    jobs: Optional[int] = None,
) -> List[ResultDict]:
    """Run `configs` on a pool of worker processes.

    Workers call :func:`run` with `reraise` off, so a failed run shows up as
    a result with ``'run.exception'`` set while the others carry on. Progress
    display is turned off in every config.

    :param list configs: One configuration per run; workspaces must differ.
    :param top_type: Component subclass at the top of each tree.
    :param env_type: :class:`RunEnvironment` subclass to instantiate.
    :param int jobs: Upper bound on worker processes.
    :returns: Results sorted by run index.
    :raises WorkerError: When a worker process dies.

    """
    if jobs is not None and jobs < 1:
        raise ValueError(f'Invalid number of jobs: {jobs}')
    if not configs:
        return []

    seen = set()
    for index, config in enumerate(configs):
        workspace = os.path.normpath(_workspace_dir(config))
        if workspace in seen:
            raise ValueError(f'Duplicate workspace: {workspace}')
        seen.add(workspace)
        config.setdefault('meta.run.index', index)
        config['run.progress.enable'] = False

    todo: 'Queue[Optional[ConfigDict]]' = Queue()
    done: 'Queue[ResultDict]' = Queue()
    n_workers = min(len(configs), cpu_count(), jobs or len(configs))
    for config in configs:
        todo.put(config)
    for _ in range(n_workers):
        todo.put(None)

    workers = [
        Process(
            name=f'run-worker-{i}',
            target=_run_worker,
            args=(top_type, env_type, todo, done),
            daemon=True,
        )
        for i in range(n_workers)
    ]
    for worker in workers:
        worker.start()
    try:
        results: List[ResultDict] = gather(done, len(configs), workers)
    except WorkerError:
        for worker in workers:
            worker.terminate()
        raise
    for worker in workers:
        worker.join(5)
    return sorted(results, key=lambda r: r['config']['meta.run.index'])


def _run_worker(
    top_type: Type['Component'],
    env_type: Type[RunEnvironment],
    todo: 'Queue[Optional[ConfigDict]]',
    done: 'Queue[ResultDict]',
) -> None:
    for config in iter(todo.get, None):
        done.put(run(config, top_type, env_type, reraise=False))


def _dump_dict(filename: Optional[str], dump_dict: Dict[str, Any]) -> None:
    """Write `dump_dict` as YAML or JSON, chosen by the extension."""
    if filename is None:
        return
    ext = os.path.splitext(filename)[1]
    if ext not in ('.yaml', '.yml', '.json'):
        raise ValueError(f'Invalid extension: {ext}')
    with atomic_open(filename) as f:
        if ext == '.json':
            json.dump(dump_dict, f, sort_keys=True, indent=2)
        else:
            yaml.safe_dump(dump_dict, stream=f)
