"""Components make up the tree of objects taking part in a run.

The top-level :class:`Component` subclass handed to :func:`~gisforge.runner.run`
builds its children in ``__init__``; each child gets a dotted scope such as
``'top.learner'`` that prefixes its log lines and metrics records.

Objects owned by one component reach another through declared connections:
the consumer names what it needs with :meth:`Component.add_connections` and
the common parent wires it in :meth:`Component.connect_children`. The trainer
wires the batch feed's :class:`simpy.Store` into the learner this way.

Run processes registered with :meth:`Component.add_process` start when the
tree is elaborated and are scheduled on the step clock of the
:class:`~gisforge.runner.RunEnvironment`.

"""
from typing import Any, Callable, Dict, Generator, List, Optional, Set, Tuple

import simpy

from .config import ConfigDict
from .runner import ResultDict, RunEnvironment

ProcessGenerator = Callable[..., Generator[simpy.Event, Any, None]]

_MISSING = object()


class ConnectError(Exception):
    pass


class Component:
    """Node of the run tree.

    :param Component parent: Owning component, None for the top of the tree.
    :param RunEnvironment env: Required when `parent` is None.
    :param str name: Overrides :attr:`base_name`.
    :param int index: Appended to the name to tell siblings apart.

    """

    #: Name used in the scope unless the constructor is given one.
    base_name: str = ''

    def __init__(
        self,
        parent: Optional['Component'],
        env: Optional[RunEnvironment] = None,
        name: Optional[str] = None,
        index: Optional[int] = None,
    ) -> None:
        if env is None:
            if parent is None:
                raise AssertionError('a top-level component needs an env')
            env = parent.env
        self.env: RunEnvironment = env

        base = self.base_name if name is None else name
        self.index = index
        self.name = base if index is None else f'{base}{index}'
        if parent is not None and parent.scope:
            self.scope = f'{parent.scope}.{self.name}'
        else:
            self.scope = self.name

        self._children: List['Component'] = []
        self._processes: List[
            Tuple[ProcessGenerator, Tuple[Any, ...], Dict[str, Any]]
        ] = []
        self._wanted: Set[str] = set()
        #: Connection name to the object assigned to it.
        self.connections: Dict[str, Any] = {}
        if parent is not None:
            parent._children.append(self)

        trace = self.env.tracemgr.get_trace_function
        self.debug = trace(self.scope, log={'level': 'DEBUG'})
        self.info = trace(self.scope, log={'level': 'INFO'})
        self.warn = trace(self.scope, log={'level': 'WARNING'})
        self.error = trace(self.scope, log={'level': 'ERROR'})

    def add_process(self, g: ProcessGenerator, *args: Any, **kwargs: Any) -> None:
        """Register ``g(*args, **kwargs)`` to be started by :meth:`elaborate`."""
        self._processes.append((g, args, kwargs))

    def add_connections(self, *names: str) -> None:
        """Declare attributes an ancestor must assign before the run."""
        self._wanted.update(names)

    def connect(
        self,
        dst: 'Component',
        dst_connection: str,
        src: Optional['Component'] = None,
        src_connection: Optional[str] = None,
        conn_obj: Any = _MISSING,
    ) -> None:
        """Set ``dst.<dst_connection>``.

        The object is `conn_obj` when given, otherwise the attribute
        `src_connection` (default: `dst_connection`) of `src` (default: this
        component).

        """
        if dst_connection not in dst._wanted:
            raise ConnectError(
                f'{dst.scope} has no connection named {dst_connection!r}'
            )
        if conn_obj is _MISSING:
            owner = self if src is None else src
            attr = dst_connection if src_connection is None else src_connection
            conn_obj = getattr(owner, attr, _MISSING)
            if conn_obj is _MISSING:
                raise ConnectError(
                    f'{owner.scope} ({type(owner).__name__}) has no {attr!r} '
                    f'for {dst.scope}.{dst_connection}'
                )
        setattr(dst, dst_connection, conn_obj)
        dst.connections[dst_connection] = conn_obj
        dst._wanted.discard(dst_connection)

    def connect_children(self) -> None:
        """Wire the children's declared connections.

        The default only checks that no child is waiting on one.

        """
        waiting = [c.scope for c in self._children if c._wanted]
        if waiting:
            raise ConnectError(
                f'{type(self).__name__}.connect_children() must connect '
                f'{", ".join(waiting)}'
            )

    @classmethod
    def initial_step(cls, config: ConfigDict) -> int:
        """Step the clock starts from; the environment does not exist yet."""
        return 0

    @classmethod
    def pre_init(cls, env: RunEnvironment) -> None:
        """Runs once the environment exists, before the tree is built."""

    def elaborate(self) -> None:
        """Connect and start the subtree, then call :meth:`elab_hook`."""
        self.connect_children()
        for child in self._children:
            if child._wanted:
                missing = sorted(child._wanted)[0]
                raise ConnectError(f'{child.scope}.{missing} not connected')
            child.elaborate()
        for g, args, kwargs in self._processes:
            self.env.process(g(*args, **kwargs))
        self.elab_hook()

    def elab_hook(self) -> None:
        """Called once the subtree is elaborated."""

    def post_run(self) -> None:
        """Call :meth:`post_run_hook` children first."""
        for child in self._children:
            child.post_run()
        self.post_run_hook()

    def post_run_hook(self) -> None:
        """Called after a run that ended without an exception."""

    def get_result(self, result: ResultDict) -> None:
        """Let every component of the subtree add to `result`, children first."""
        for child in self._children:
            child.get_result(result)
        self.get_result_hook(result)

    def get_result_hook(self, result: ResultDict) -> None:
        """Add this component's entries to the run's result dict."""
