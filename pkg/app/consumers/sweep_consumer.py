"""
扫描任务消费者
把 (算法, 扫描点, 种子) 任务分发到进程池，并由主进程单点收集结果
"""
import os
import traceback
from concurrent.futures import Future, ProcessPoolExecutor, as_completed
from typing import Dict, List, Optional

from loguru import logger

from app.config import settings
from app.models import SweepTask, TaskResult
from app.services.experiment import run_task


class SweepConsumer:
    """扫描任务消费者"""

    def __init__(self, workers: Optional[int] = None):
        workers = settings.sweep_workers if workers is None else workers
        self.workers = workers or os.cpu_count() or 1
        self.executor: Optional[ProcessPoolExecutor] = None
        self.results: List[TaskResult] = []
        self._total = 0

    def connect(self):
        """创建工作进程池，单进程时在当前进程内串行执行"""
        if self.workers > 1:
            self.executor = ProcessPoolExecutor(max_workers=self.workers)
            logger.info(f"Started process pool with {self.workers} workers")
        else:
            logger.info("Running tasks in-process")

    def start_consuming(self, tasks: List[SweepTask]) -> List[TaskResult]:
        """
        消费全部任务

        Args:
            tasks: 任务列表

        Returns:
            与任务一一对应的结果（完成顺序）
        """
        self.results = []
        self._total = len(tasks)
        if self.executor is None:
            for task in tasks:
                self._send_result(self._handle_message(task))
            return self.results

        futures: Dict[Future, SweepTask] = {self.executor.submit(run_task, task): task for task in tasks}
        for future in as_completed(futures):
            self._send_result(self._handle_message(futures[future], future))
        return self.results

    def _handle_message(self, task: SweepTask, future: Optional[Future] = None) -> TaskResult:
        """取回单个任务的结果，工作进程异常转为 failed 结果"""
        try:
            if future is None:
                return run_task(task)
            return future.result()
        except Exception as e:
            logger.error(f"Failed to process task {task.algorithm.value}/{task.value:g}/{task.seed}: {e}")
            logger.error(traceback.format_exc())
            return TaskResult(algorithm=task.algorithm, value=task.value, seed=task.seed,
                              status="failed", error_msg=str(e))

    def _send_result(self, result: TaskResult):
        """结果只在主进程写入"""
        self.results.append(result)
        logger.info(f"[{len(self.results)}/{self._total}] {result.algorithm.value} value={result.value:g} "
                    f"seed={result.seed}: status={result.status}, objective={result.objective_bps:.6g} bps/Hz")

    def close(self):
        """关闭进程池"""
        if self.executor:
            self.executor.shutdown(wait=True, cancel_futures=True)
            self.executor = None
            logger.info("Process pool closed")
