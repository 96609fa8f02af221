import enum
import logging
import os
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from app.core.config import get_settings

logger = logging.getLogger(__name__)


class TaskStatus(str, enum.Enum):
    PENDING = "pending"
    FAILED = "failed"
    PROCESSING = "processing"
    COMPLETED = "completed"


class ChunkTask:
    """一个计算分块，例如一批蒙特卡洛路径或一个查询点"""

    def __init__(self, chunk_id: int, func: Callable, payload: Any):
        self._chunk_id = chunk_id
        self._func = func
        self._payload = payload
        self._status = TaskStatus.PENDING
        self._result: Any = None
        self._error: Optional[Exception] = None
        self._started_at: Optional[float] = None
        self._completed_at: Optional[float] = None

    @property
    def chunk_id(self) -> int:
        return self._chunk_id

    @property
    def payload(self) -> Any:
        return self._payload

    @property
    def status(self) -> TaskStatus:
        return self._status

    @property
    def result(self) -> Any:
        return self._result

    @property
    def error(self) -> Optional[Exception]:
        return self._error

    @property
    def elapsed(self) -> Optional[float]:
        if self._started_at is None or self._completed_at is None:
            return None
        return self._completed_at - self._started_at

    def update_status(self, status: TaskStatus) -> None:
        """状态更新校验"""
        valid_transitions = {
            TaskStatus.PENDING: [TaskStatus.PROCESSING, TaskStatus.FAILED],
            TaskStatus.PROCESSING: [TaskStatus.COMPLETED, TaskStatus.FAILED],
            TaskStatus.COMPLETED: [],
            TaskStatus.FAILED: []
        }
        current = self._status
        if status not in valid_transitions.get(current, []):
            raise ValueError(f"无效的状态转换: {current} -> {status} (分块: {self._chunk_id})")
        self._status = status

    def run(self) -> Any:
        self.update_status(TaskStatus.PROCESSING)
        self._started_at = time.perf_counter()
        try:
            self._result = self._func(self._payload)
        except Exception as e:
            self._error = e
            self._completed_at = time.perf_counter()
            self.update_status(TaskStatus.FAILED)
            raise
        self._completed_at = time.perf_counter()
        self.update_status(TaskStatus.COMPLETED)
        return self._result

    def to_dict(self) -> Dict[str, Any]:
        return {
            "chunk_id": self._chunk_id,
            "status": self._status.value,
            "error": str(self._error) if self._error else None,
            "elapsed": self.elapsed,
        }


def resolve_workers(max_workers: Optional[int] = None) -> int:
    if max_workers is None:
        max_workers = get_settings().ROOT_BARRIER_THREADS
    if max_workers is None:
        max_workers = os.cpu_count() or 1
    return max(1, int(max_workers))


def spawn_generators(seed: int, n: int) -> List[np.random.Generator]:
    """按分块编号派生独立随机数流，结果与线程数无关"""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(child) for child in children]


def split_counts(total: int, chunk_size: int) -> List[int]:
    if total <= 0:
        return []
    chunk_size = max(1, chunk_size)
    counts = [chunk_size] * (total // chunk_size)
    if total % chunk_size:
        counts.append(total % chunk_size)
    return counts


class ChunkRunner:
    """线程池分块执行器，按提交顺序返回结果"""

    def __init__(self, max_workers: Optional[int] = None, name: str = "chunk"):
        self._max_workers = resolve_workers(max_workers)
        self._name = name
        self._lock = threading.Lock()
        self._tasks: List[ChunkTask] = []

    @property
    def max_workers(self) -> int:
        return self._max_workers

    @property
    def tasks(self) -> List[ChunkTask]:
        with self._lock:
            return list(self._tasks)

    def map(self, func: Callable, payloads: Sequence[Any]) -> List[Any]:
        tasks = [ChunkTask(i, func, p) for i, p in enumerate(payloads)]
        with self._lock:
            self._tasks = tasks
        if not tasks:
            return []

        started = time.perf_counter()
        if self._max_workers == 1 or len(tasks) == 1:
            results = [task.run() for task in tasks]
        else:
            with ThreadPoolExecutor(max_workers=self._max_workers,
                                    thread_name_prefix=self._name) as executor:
                futures: List[Future] = [executor.submit(task.run) for task in tasks]
                results = []
                for task, future in zip(tasks, futures):
                    try:
                        results.append(future.result())
                    except Exception as e:
                        logger.error(f"分块执行失败，{self._name}#{task.chunk_id}, 错误: {str(e)}")
                        raise
        logger.debug(f"{self._name}: {len(tasks)} 个分块完成，线程数 {self._max_workers}，"
                     f"耗时 {time.perf_counter() - started:.3f}s")
        return results
