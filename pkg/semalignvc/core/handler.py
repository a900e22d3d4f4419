#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# This file is part of semalignvc.
#
# semalignvc is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.


"""Handler Class

Per-utterance work (toy synthesis, feature extraction) is independent, so it is
spread over worker processes with a job queue and a result queue.
"""

import logging
import multiprocessing as mp
import queue
import time

from semalignvc import progbar

__all__ = ['Paralleler']

logger = logging.getLogger(__name__)


class Paralleler(object):
    """This is a base class of all classes that work parallel.
    Here is the description of the procedures:
        * The main entrance is the method `process()`. It creates a job queue (for tasks sent to all sub-processes)
        and a result queue (for results returned by all sub-processes). It also creates a number of worker
        processes, each of whom will execute the method `_worker_loop()`. After creating worker processes,
        it fills the job queue with the input jobs. Finally it uses `_process_results()` to merge the results
        of each worker process into one final Python object.
        * The `_worker_loop()` method fetches one job, sends it to `_do_process_job()` and puts
        `(index, result)` on the result queue, so results come back in input order.
        * Any sub-class implements `_do_process_job()`.
        * With `workers <= 1` the jobs are processed in the current process, which keeps
        exceptions and tracebacks readable.

    Attributes
    ----------
    workers : int
        Number of CPU cores to be used parallel.
    timeout : float or None
        Seconds to wait for all results before giving up (None waits as long as a worker is alive).
    """

    poll_interval = 1.0

    def __init__(self, workers=1, timeout=None, **kwargs):
        self.timeout = timeout
        if workers == 0:
            workers = max(1, mp.cpu_count() - 1)
        self.workers = max(1, min(int(workers), mp.cpu_count()))
        # add other possible arguments to the `__dict__` of the class
        self.__dict__.update(kwargs)

    def process(self, jobs, desc='  utterances'):
        """Process all `jobs`.

        Parameters
        ----------
        jobs : list
            Picklable job objects understood by `_do_process_job()`.

        Returns
        -------
        object
            The merged result built by `_process_results()`.
        """
        jobs = list(jobs)
        if self.workers <= 1 or len(jobs) <= 1:
            results = [self._do_process_job(job) for job in progbar(jobs, unit='utt', desc=desc)]
            return self._process_results(results)

        manager = mp.Manager()
        job_queue = manager.Queue()
        res_queue = manager.Queue()

        workers = [
            mp.Process(target=self._worker_loop, args=(job_queue, res_queue))
            for _ in range(self.workers)
        ]
        for worker in workers:
            worker.daemon = True  # make interrupting the process with ctrl+c easier
            worker.start()

        self._job_producer(jobs, job_queue)

        results = [None] * len(jobs)
        failures = []
        deadline = None if self.timeout is None else time.monotonic() + self.timeout
        try:
            for _ in progbar(range(len(jobs)), unit='utt', desc=desc):
                idx, ok, res = self._next_result(res_queue, workers, deadline)
                if ok:
                    results[idx] = res
                else:
                    failures.append((idx, res))
            for worker in workers:
                worker.join()
        finally:
            for worker in workers:
                if worker.is_alive():
                    worker.terminate()
            manager.shutdown()

        if failures:
            idx, message = failures[0]
            raise RuntimeError("{} of {} jobs failed; first failure (job {}): {}".format(
                len(failures), len(jobs), idx, message))
        return self._process_results(results)

    def _next_result(self, res_queue, workers, deadline):
        """Wait for the next `(index, ok, result)`, failing when no worker is left to send it."""
        while True:
            try:
                return res_queue.get(timeout=self.poll_interval)
            except queue.Empty:
                pass
            crashed = [w for w in workers if w.exitcode not in (None, 0)]
            if crashed:
                raise RuntimeError("worker {} died with exit code {} before all jobs were done".format(
                    crashed[0].name, crashed[0].exitcode))
            if all(w.exitcode is not None for w in workers) and res_queue.empty():
                raise RuntimeError("all workers exited before all jobs were done")
            if deadline is not None and time.monotonic() > deadline:
                raise RuntimeError("no result within {} s".format(self.timeout))

    def _job_producer(self, jobs, job_queue):
        """Fill the job queue, then put one None per worker so every worker stops."""
        for idx, job in enumerate(jobs):
            job_queue.put((idx, job))
        for _ in range(self.workers):
            job_queue.put(None)
        logger.debug("job loop exiting, total {} jobs".format(len(jobs)))

    def _worker_loop(self, job_queue, res_queue):
        while True:
            item = job_queue.get()
            if item is None:
                break
            idx, job = item
            try:
                res_queue.put((idx, True, self._do_process_job(job)))
            except Exception as err:  # reported back to the parent process
                logger.exception(err)
                res_queue.put((idx, False, repr(err)))
        logger.debug("worker exiting")

    def _do_process_job(self, job):
        """Process a single job and return its result."""
        raise NotImplementedError

    def _process_results(self, results):
        """Post-process (merge) the results. By default the ordered list is returned."""
        return results
