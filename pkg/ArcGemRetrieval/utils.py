""" ArcGemRetrieval.utils

    General utilities for ArcGemRetrieval, not specific to any one stage of the pipeline

"""

import hashlib
import math
import os
import pathlib
import tempfile
from ArcGemRetrieval.constants import *

class Directories():
    """ Helper class for managing the paths of a run directory

        The managed paths can be accessed either with dot notation (directories.run) or via item syntax (directories["run"]).

        For each path managed by a Directories object three options can be set:
            default: A callback or value to return when a path is retrieved and its value is None
            on_set: A callback to call when the value of a path is about to be set.
                    Should return a value which will be the final value the path is set to.
            not_exists: A callback to call when a path is retrieved and its value is a Path that does not exist.
                        It receives the non-existing Path and its return value is passed on to the caller
                        (returning None passes on the original Path, which is convenient for callbacks that mkdir).

        Values set for paths (other than None) will automatically be converted to a pathlib.Path instance made absolute with Path.resolve().

        :param directories: key-value pairs where the key is a name to register (the name used to retrieve the path)
                            and the value is a dict containing optional keys:
                            * *value* - The initial value for the path
                            * *default* - As described above
                            * *on_set* - As described above
                            * *not_exists* - As described above

        :return: A new Directories instance
    """
    def __init__(self, **directories):
        """ Creates a new Directories instance """
        self._items = dict()
        for dire,options in directories.items():
            if options is None: options = {}
            self.add_directory(dire, **options)

    def add_directory(self, dire, value = None, default = None, on_set = None, not_exists = None):
        if dire in self._items:
            raise AttributeError(f'Duplicate directory: "{dire}" is already defined')
        self._items[dire] = dict()
        self.set_default(dire, default)
        self.set_on_set(dire, on_set)
        self.set_not_exists(dire, not_exists)
        self[dire] = value

    def set_default(self, dire, value):
        """ Sets the default to be returned when the [dire] path is None """
        if dire not in self._items:
            raise AttributeError(f'No directory defined named "{dire}"')
        self._items[dire]["default"] = value

    def set_on_set(self, dire, value):
        """ Sets the callback that will be called when the [dire] path is set. """
        if dire not in self._items:
            raise AttributeError(f'No directory defined named "{dire}"')
        if value and not callable(value):
            raise ValueError(f"'{value}' does not appear to be callable")
        self._items[dire]["on_set"] = value

    def set_not_exists(self, dire, value):
        """ Sets the callback that will be called when the [dire] path's value is a non-existing Path """
        if dire not in self._items:
            raise AttributeError(f'No directory defined named "{dire}"')
        if value and not callable(value):
            raise ValueError(f"'{value}' does not appear to be callable")
        self._items[dire]["not_exists"] = value

    def is_directory(self, name):
        """ Simple function to check if a path name is registered

            :param name: The name to check for
            :type name: str

            :returns: Whether the name is registered
            :rtype: bool
        """
        return name in self._items

    def __getitem__(self, name):
        return self.__getattr__(name)

    def __setitem__(self, name, value):
        if name not in self._items:
            raise AttributeError(f'No directory defined named "{name}"')
        on_set = self._items[name].get("on_set")
        if on_set:
            value = on_set(value)
        if value:
            if not isinstance(value, (str, pathlib.Path)):
                raise TypeError(f"Invalid type for directory: {value.__class__}")
            value = pathlib.Path(value).resolve()
        self._items[name]['value'] = value

    def __getattr__(self, name):
        if name.startswith("__") or name == "_items":
            raise AttributeError(name)
        if name not in self._items:
            raise AttributeError(f'No directory defined named "{name}"')
        defi = self._items[name]
        value = defi.get("value")
        if value is None and (callback := defi.get("default")) is not None:
            value = callback() if callable(callback) else callback
            if isinstance(value, str): value = pathlib.Path(value)
        if value and not value.exists() and (callback := defi.get("not_exists")):
            value = callback(value) or value
        return value

    def __setattr__(self, name, value):
        if name == "_items" or name not in self._items:
            super().__setattr__(name, value)
            return
        self[name] = value

def run_directories(run_dir):
    """ Creates the Directories layout used by an experiment run.

        The run directory is created the first time it is referenced.

        :param run_dir: The run directory
        :type run_dir: Union[str, pathlib.Path]

        :return: A Directories instance with "run", "images" and "config", "dataset_config", "manifest", "ground_truth",
                 "report_md" and "report_csv" registered
        :rtype: Directories
    """
    def mkdir(path):
        path.mkdir(parents = True, exist_ok = True)
    directories = Directories(run = dict(value = run_dir, not_exists = mkdir))
    directories.add_directory("images", default = lambda: directories.run / IMAGEDUMPDIR, not_exists = mkdir)
    for name, fname in [("config", RESOLVEDCONFIG), ("dataset_config", DATASETCONFIG), ("manifest", MANIFESTNAME),
                        ("ground_truth", GROUNDTRUTHNAME), ("report_md", REPORTMD), ("report_csv", REPORTCSV)]:
        directories.add_directory(name, default = lambda fname = fname: directories.run / fname)
    return directories

def calculate_md5(data):
    """ Calculates the md5 of a file or of raw bytes.

        :param data: The bytes to hash, or the path to a file.
        :type data: Union[bytes, str, pathlib.Path]

        :return: The md5 hash
        :rtype: str
    """
    if isinstance(data, (str, pathlib.Path)):
        data = pathlib.Path(data).read_bytes()
    return hashlib.md5(data).hexdigest()

def stream_key(seed, stream):
    """ Derives a 128-bit key from a seed and a stream label (used to key the counter-based generator).

        :param seed: 64-bit integer seed
        :type seed: int

        :param stream: Sub-stream label
        :type stream: str

        :rtype: int
    """
    return int(calculate_md5(f"{int(seed)}/{stream}".encode("utf-8")), 16)

def atomic_write(path, data):
    """ Writes data to path atomically: the data goes to a temporary file in the same directory
            which is then renamed over path. A failed write never leaves a partial file behind.

        :param path: Destination path
        :type path: Union[str, pathlib.Path]

        :param data: The bytes (or text, written as UTF-8 with LF line endings) to write
        :type data: Union[bytes, str]
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)
    if isinstance(data, str): data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir = path.parent, prefix = f".{path.name}.", suffix = ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        pathlib.Path(tmp).unlink(missing_ok = True)
        raise

def iter_batches(items, batch_size):
    """ Yields consecutive slices of items of at most batch_size elements """
    for start in range(0, len(items), batch_size):
        yield items[start:start + batch_size]

def round_half_up(value):
    """ Rounds to the nearest integer with halves rounded up (Python's round() rounds halves to even) """
    return int(math.floor(value + 0.5))
