""" ArcGemRetrieval.multiprocessing

    Parallel execution of the per-image work (rendering, augmentation, feature and descriptor extraction) that
        dominates a run, at the cost of system resources.

    Work Flow:
                   Main Process
                        |
        ---------------------------------
        |          |          |         |
     worker     worker     worker    worker

    Progression:
    * The Main Process splits the items into contiguous chunks and hands them to a Pool of workers
    * Each worker applies the function to its chunk; every item carries its own seeded random stream,
        so the result of an item never depends on which worker computed it or when
    * The Main Process reassembles the results in the original item order

    With processes <= 1 everything runs in the Main Process, which is the reference (and default) mode.
"""

import logging
import multiprocessing as mp

logger = logging.getLogger(__name__)

def chunk_size(items, processes):
    """ Size of the chunks handed to each worker: about four chunks per worker, at least 1 """
    return max(1, len(items) // (processes * 4))

def parallel_map(func, items, processes = 1):
    """ Applies func to every item and returns the results in item order.

        :param func: A picklable (module-level) function of one argument
        :type func: Callable

        :param items: The items to process
        :type items: Iterable

        :param processes: Number of worker processes, defaults to 1 (no pool is created)
        :type processes: int

        :rtype: list
    """
    items = list(items)
    if processes is None or processes <= 1 or len(items) < 2:
        return [func(item) for item in items]
    processes = min(processes, len(items))
    logger.debug("Mapping %s over %d items with %d processes", getattr(func, "__name__", func), len(items), processes)
    with mp.Pool(processes) as pool:
        return pool.map(func, items, chunksize = chunk_size(items, processes))
