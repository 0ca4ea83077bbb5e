"""
Thread Pool Manager for ediv
Runs independent jobs (child tuning, per-channel visualisations, per-image
hashing and saliency) on worker threads with per-worker metrics and health checks
"""

import logging
import os
import queue
import statistics
import threading
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import psutil

logger = logging.getLogger(__name__)

WORKERS_ENV = "EDIV_WORKERS"


class JobFailedError(RuntimeError):
    """Raised when one or more pool jobs fail"""

    def __init__(self, failures: Dict[Hashable, str],
                 exceptions: Optional[Dict[Hashable, BaseException]] = None):
        self.failures = failures
        self.exceptions = exceptions or {}
        first = next(iter(failures.items()))
        super().__init__(f"{len(failures)} job(s) failed; first {first[0]!r}: {first[1]}")


@dataclass
class WorkerMetrics:
    """Metrics for one worker thread"""
    worker_id: int
    jobs_completed: int = 0
    jobs_failed: int = 0
    total_duration: float = 0.0
    avg_job_duration: float = 0.0
    last_heartbeat: float = field(default_factory=time.time)
    consecutive_failures: int = 0
    is_healthy: bool = True

    def update_performance(self, duration: float, success: bool):
        if success:
            self.jobs_completed += 1
            self.total_duration += duration
            self.avg_job_duration = self.total_duration / self.jobs_completed
            self.consecutive_failures = 0
        else:
            self.jobs_failed += 1
            self.consecutive_failures += 1
        self.last_heartbeat = time.time()
        self.is_healthy = self.consecutive_failures < 5  # Circuit breaker


@dataclass
class PoolMetrics:
    """Aggregate pool metrics"""
    start_time: float = field(default_factory=time.time)
    jobs_submitted: int = 0
    jobs_completed: int = 0
    jobs_failed: int = 0
    total_job_duration: float = 0.0
    avg_job_duration: float = 0.0
    jobs_per_minute: float = 0.0
    success_rate: float = 1.0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))

    def update(self, duration: float, success: bool):
        self.jobs_completed += 1
        self.total_job_duration += duration
        if not success:
            self.jobs_failed += 1
        self.avg_job_duration = self.total_job_duration / self.jobs_completed
        self.success_rate = (self.jobs_completed - self.jobs_failed) / self.jobs_completed
        uptime = time.time() - self.start_time
        if uptime > 0:
            self.jobs_per_minute = (self.jobs_completed / uptime) * 60
        self.history.append({'duration': duration, 'success': success})


def detect_worker_count() -> int:
    """Worker count from CPU cores and memory, bounded to [1, 16]"""
    cpu_count = psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True) or 1
    memory_gb = psutil.virtual_memory().total / (1024 ** 3)
    optimal = max(1, min(cpu_count, int(memory_gb), 16))
    logger.info(f"Detected worker count: {optimal} (CPU: {cpu_count}, Memory: {memory_gb:.1f}GB)")
    return optimal


def resolve_worker_count(configured: int = 0) -> int:
    """EDIV_WORKERS overrides the configured value; 0 means auto-detect"""
    override = os.environ.get(WORKERS_ENV)
    if override:
        try:
            configured = int(override)
        except ValueError:
            logger.warning(f"Ignoring non-integer {WORKERS_ENV}={override!r}")
    if configured < 0:
        raise ValueError(f"Worker count must be >= 0, got {configured}")
    return configured if configured > 0 else detect_worker_count()


class WorkerThread:
    """Worker pulling (job_id, fn, args, kwargs) records from a shared queue"""

    def __init__(self, worker_id: int, job_queue: queue.Queue, result_queue: queue.Queue,
                 metrics: Optional[WorkerMetrics] = None):
        self.worker_id = worker_id
        self.job_queue = job_queue
        self.result_queue = result_queue
        self.is_active = True
        self.jobs_processed = 0
        self.start_time = time.time()
        self.last_activity = time.time()
        self.current_job: Optional[Hashable] = None
        self.thread: Optional[threading.Thread] = None
        self.metrics = metrics or WorkerMetrics(worker_id=worker_id)

    def start(self):
        self.thread = threading.Thread(target=self._run, name=f"Worker-{self.worker_id}")
        self.thread.daemon = True
        self.thread.start()

    def stop(self):
        self.is_active = False
        if self.thread and self.thread.is_alive():
            self.thread.join(timeout=5.0)

    def _run(self):
        while self.is_active:
            try:
                job = self.job_queue.get(timeout=0.5)
            except queue.Empty:
                continue
            if job is None:  # Poison pill
                self.job_queue.task_done()
                break

            job_id, fn, args, kwargs = job
            self.current_job = job_id
            self.last_activity = time.time()
            started = time.time()
            try:
                result = fn(*args, **kwargs)
                duration = time.time() - started
                self.metrics.update_performance(duration, success=True)
                record = {'job_id': job_id, 'worker_id': self.worker_id, 'result': result,
                          'duration': duration, 'success': True}
            except Exception as e:
                duration = time.time() - started
                self.metrics.update_performance(duration, success=False)
                logger.error(f"Worker {self.worker_id} job {job_id!r} failed: {e}")
                logger.debug(traceback.format_exc())
                record = {'job_id': job_id, 'worker_id': self.worker_id,
                          'error': f"{type(e).__name__}: {e}", 'exception': e,
                          'duration': duration,
                          'success': False}
                if not self.metrics.is_healthy:
                    logger.warning(f"Worker {self.worker_id} marked unhealthy after "
                                   f"{self.metrics.consecutive_failures} consecutive failures")
            self.jobs_processed += 1
            self.current_job = None
            self.result_queue.put(record)
            self.job_queue.task_done()

    def get_stats(self) -> Dict[str, Any]:
        return {
            'worker_id': self.worker_id,
            'jobs_processed': self.jobs_processed,
            'uptime': time.time() - self.start_time,
            'is_active': self.is_active,
            'busy': self.current_job is not None,
            'metrics': {
                'jobs_completed': self.metrics.jobs_completed,
                'jobs_failed': self.metrics.jobs_failed,
                'avg_job_duration': self.metrics.avg_job_duration,
                'is_healthy': self.metrics.is_healthy,
            },
        }


class ThreadPoolManager:
    """Fixed-size worker pool with result collection and health reporting"""

    def __init__(self, max_workers: Optional[int] = None, queue_size: int = 10000):
        """
        Args:
            max_workers: number of worker threads (auto-detected if None)
            queue_size: maximum number of queued jobs
        """
        self.max_workers = max_workers or resolve_worker_count(0)
        self.queue_size = queue_size
        self.workers: List[WorkerThread] = []
        self.job_queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self.result_queue: queue.Queue = queue.Queue()
        self.is_running = False
        self.start_time: Optional[float] = None
        self.pool_metrics = PoolMetrics()
        self.total_submitted = 0
        self.total_collected = 0
        logger.debug(f"Initialized ThreadPoolManager with {self.max_workers} workers")

    def __enter__(self) -> "ThreadPoolManager":
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.stop()

    def start(self):
        if self.is_running:
            return
        self.is_running = True
        self.start_time = time.time()
        self.pool_metrics.start_time = self.start_time
        for i in range(self.max_workers):
            worker = WorkerThread(i, self.job_queue, self.result_queue, WorkerMetrics(worker_id=i))
            worker.start()
            self.workers.append(worker)
        logger.info(f"Started thread pool with {len(self.workers)} workers")

    def stop(self):
        if not self.is_running:
            return
        self.is_running = False
        for _ in self.workers:
            try:
                self.job_queue.put(None, timeout=1.0)
            except queue.Full:
                break
        for worker in self.workers:
            worker.stop()
        self.workers.clear()
        logger.info("Stopped thread pool")

    def submit(self, job_id: Hashable, fn: Callable, *args, **kwargs) -> bool:
        if not self.is_running:
            return False
        try:
            self.job_queue.put((job_id, fn, args, kwargs), timeout=5.0)
        except queue.Full:
            logger.warning(f"Job queue is full, job {job_id!r} rejected")
            return False
        self.total_submitted += 1
        self.pool_metrics.jobs_submitted += 1
        return True

    def get_results(self, timeout: float = 0.1) -> List[Dict[str, Any]]:
        results = []
        while True:
            try:
                record = self.result_queue.get(timeout=timeout)
            except queue.Empty:
                break
            results.append(record)
            self.total_collected += 1
            self.pool_metrics.update(record.get('duration', 0.0), record.get('success', False))
        return results

    def wait_for_completion(self, timeout: Optional[float] = None) -> List[Dict[str, Any]]:
        """Collect every outstanding result"""
        started = time.time()
        collected: List[Dict[str, Any]] = []
        while self.total_collected < self.total_submitted:
            if timeout is not None and time.time() - started > timeout:
                logger.error(f"Timed out with {self.total_submitted - self.total_collected} "
                             f"jobs outstanding")
                break
            collected.extend(self.get_results(timeout=0.1))
            if self.workers and not any(w.thread and w.thread.is_alive() for w in self.workers):
                logger.error("All workers have stopped unexpectedly")
                break
        return collected

    def map(self, fn: Callable, items: Sequence[Tuple[Hashable, tuple]]) -> List[Any]:
        """Run fn(*args) for each (job_id, args); results come back in submission order"""
        order = [job_id for job_id, _ in items]
        for job_id, args in items:
            if not self.submit(job_id, fn, *args):
                raise JobFailedError({job_id: "could not be queued"})
        records = {r['job_id']: r for r in self.wait_for_completion()}
        failed = [job_id for job_id in order
                  if job_id in records and not records[job_id]['success']]
        failures = {job_id: records[job_id]['error'] for job_id in failed}
        exceptions = {job_id: records[job_id]['exception'] for job_id in failed}
        missing = [job_id for job_id in order if job_id not in records]
        for job_id in missing:
            failures[job_id] = "no result returned"
        if failures:
            raise JobFailedError(failures, exceptions)
        return [records[job_id]['result'] for job_id in order]

    def get_stats(self) -> Dict[str, Any]:
        uptime = time.time() - self.start_time if self.start_time else 0.0
        recent = list(self.pool_metrics.history)[-100:]
        process = psutil.Process(os.getpid())
        return {
            'pool_stats': {
                'is_running': self.is_running,
                'max_workers': self.max_workers,
                'uptime': uptime,
                'jobs_submitted': self.total_submitted,
                'jobs_completed': self.pool_metrics.jobs_completed,
                'jobs_failed': self.pool_metrics.jobs_failed,
                'jobs_pending': self.total_submitted - self.total_collected,
                'jobs_per_minute': self.pool_metrics.jobs_per_minute,
                'avg_job_duration': self.pool_metrics.avg_job_duration,
                'recent_avg_duration': statistics.mean(h['duration'] for h in recent)
                if recent else 0.0,
                'success_rate': self.pool_metrics.success_rate,
            },
            'worker_stats': [worker.get_stats() for worker in self.workers],
            'system_stats': {
                'memory_mb': process.memory_info().rss / (1024 * 1024),
                'threads_active': len(self.workers),
            },
        }

    def health_check(self) -> Dict[str, Any]:
        issues, warnings = [], []
        healthy = 0
        for worker in self.workers:
            if worker.thread is not None and not worker.thread.is_alive():
                issues.append(f"Worker {worker.worker_id} thread is dead")
            elif not worker.metrics.is_healthy:
                warnings.append(f"Worker {worker.worker_id} is unhealthy "
                                f"({worker.metrics.consecutive_failures} consecutive failures)")
            else:
                healthy += 1
        if self.pool_metrics.jobs_completed and self.pool_metrics.success_rate < 0.95:
            warnings.append(f"Success rate is low ({self.pool_metrics.success_rate * 100:.1f}%)")
        return {
            'healthy': not issues and healthy == len(self.workers),
            'status': 'healthy' if not issues and not warnings else
                      'degraded' if not issues else 'critical',
            'issues': issues,
            'warnings': warnings,
            'healthy_workers': healthy,
        }


def run_jobs(fn: Callable, items: Sequence[Tuple[Hashable, tuple]], workers: int = 1) -> List[Any]:
    """Run jobs inline when workers <= 1, otherwise through a ThreadPoolManager"""
    if workers <= 1 or len(items) <= 1:
        results = []
        failures: Dict[Hashable, str] = {}
        exceptions: Dict[Hashable, BaseException] = {}
        for job_id, args in items:
            try:
                results.append(fn(*args))
            except Exception as e:
                logger.error(f"Job {job_id!r} failed: {e}")
                failures[job_id] = f"{type(e).__name__}: {e}"
                exceptions[job_id] = e
        if failures:
            raise JobFailedError(failures, exceptions)
        return results
    with ThreadPoolManager(max_workers=min(workers, len(items))) as pool:
        return pool.map(fn, items)
