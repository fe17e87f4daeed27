""" ArcGemRetrieval.fileformats

    Readers and writers for every file of a run directory. All files are written atomically.

    Checkpoint (.agrc), little endian:
        magic "AGRC", u32 version
        six sections in fixed order, each a u64 byte length followed by its payload:
            backbone    u32 P, u32 S, u32 C, u64 seed, C*3*P*P f32 projection
            head        u32 D, u32 C, u32 K, f32 gem_p, D*C f32 W_emb, D f32 b_emb, K*D f32 W_cls,
                        f32 scale, f32 margin, f32 cos_eps
            optimizer   u32 count, then per tensor: u32 ndim, ndim * u32 dims, f32 data
            schedule    u8 present; when present: u8 kind, f32 lr0, f32 lr, u32 epoch, u32 total_epochs,
                        f32 best_loss, u32 epochs_since_improve, u32 patience, f32 threshold, f32 decay_factor,
                        u8 bump_on_first_decay, u32 decays, u32 margin_index, u32 n, n * f32 margins
            log         u32 n, then per epoch: u32 epoch, f32 loss, f32 lr, f32 margin, u32 resolution
            preprocess  f32 crop_ratio, 3 * f32 mean, u32 train_resolution, u32 test_resolution

    Descriptor set (.dsc1), little endian:
        magic "DSC1", u32 version, u32 N, u32 D, u8 normalized, N*D f32 row-major,
        N * (u32 length, utf-8 id), u32 length, utf-8 model_tag

    CSV files use LF line endings and the column orders in ArcGemRetrieval.constants.
"""

import csv
import io
import logging
import pathlib
import struct

import numpy as np

from ArcGemRetrieval.backbone import BackboneParams
from ArcGemRetrieval.constants import *
from ArcGemRetrieval.errors import FormatError
from ArcGemRetrieval.head import ArcMarginConfig, HeadParams
from ArcGemRetrieval.imaging import DatasetManifest, ManifestRow, PreprocessConfig
from ArcGemRetrieval.optim import ScheduleState, SgdState
from ArcGemRetrieval.retrieval import DescriptorSet, EvalReport, QueryScore, RetrievalResult
from ArcGemRetrieval.trainer import Checkpoint, EpochRecord
from ArcGemRetrieval.utils import atomic_write

logger = logging.getLogger(__name__)

F32 = np.dtype("<f4")

class _Writer():
    def __init__(self):
        self.buffer = io.BytesIO()

    def pack(self, fmt, *values):
        self.buffer.write(struct.pack("<" + fmt, *values))

    def floats(self, array):
        self.buffer.write(np.ascontiguousarray(array, dtype = F32).tobytes())

    def string(self, text):
        data = text.encode("utf-8")
        self.pack("I", len(data))
        self.buffer.write(data)

    def getvalue(self):
        return self.buffer.getvalue()

class _Reader():
    def __init__(self, data, what):
        self.data, self.what, self.offset = memoryview(data), what, 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise FormatError(f"Truncated {self.what}: needed {size} bytes at offset {self.offset}, {len(self.data) - self.offset} left")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        fmt = struct.Struct("<" + fmt)
        values = fmt.unpack(self.take(fmt.size))
        return values if len(values) > 1 else values[0]

    def floats(self, *shape):
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(count * 4), dtype = F32).astype(np.float32).reshape(shape)

    def string(self):
        return bytes(self.take(self.unpack("I"))).decode("utf-8")

    def header(self, magic, version):
        if bytes(self.take(len(magic))) != magic:
            raise FormatError(f"Not a {self.what}: bad magic")
        if (found := self.unpack("I")) != version:
            raise FormatError(f"Unsupported {self.what} version {found}, expected {version}")

    def done(self):
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes in {self.what}")

## Checkpoint

def _backbone_section(bp):
    w = _Writer()
    w.pack("IIIQ", bp.patch, bp.stride, bp.channels, bp.seed)
    w.floats(bp.projection)
    return w.getvalue()

def _head_section(head, arcmargin):
    w = _Writer()
    w.pack("III", head.embedding_dim, head.channels, head.class_count)
    for name in HEAD_TENSORS:
        w.floats(getattr(head, name))
    w.pack("fff", arcmargin.s, arcmargin.m, arcmargin.cos_clamp_eps)
    return w.getvalue()

def _optimizer_section(state):
    w = _Writer()
    w.pack("I", len(HEAD_TENSORS))
    for name in HEAD_TENSORS:
        buffer = state.velocity[name]
        w.pack("I", buffer.ndim)
        w.pack(f"{buffer.ndim}I", *buffer.shape)
        w.floats(buffer)
    return w.getvalue()

def _schedule_section(schedule):
    w = _Writer()
    w.pack("B", schedule is not None)
    if schedule is not None:
        w.pack("BffIIfIIffBII", SCHEDULERS.index(schedule.kind), schedule.lr0, schedule.lr, schedule.epoch,
               schedule.total_epochs, schedule.best_loss, schedule.epochs_since_improve, schedule.patience,
               schedule.threshold, schedule.decay_factor, schedule.resolution_bump_on_first_decay,
               schedule.decays, schedule.margin_index)
        w.pack("I", len(schedule.margin_schedule))
        w.floats(schedule.margin_schedule)
    return w.getvalue()

def _log_section(log):
    w = _Writer()
    w.pack("I", len(log))
    for record in log:
        w.pack("IfffI", record.epoch, record.loss, record.lr, record.margin, record.resolution)
    return w.getvalue()

def _preprocess_section(preprocess):
    w = _Writer()
    w.pack("ffffII", preprocess.crop_ratio, *preprocess.mean, preprocess.train_resolution, preprocess.test_resolution)
    return w.getvalue()

def encode_checkpoint(checkpoint):
    """ Serializes a Checkpoint to the AGRC byte layout

        :rtype: bytes
    """
    w = _Writer()
    w.buffer.write(CHECKPOINT_MAGIC)
    w.pack("I", CHECKPOINT_VERSION)
    for section in [_backbone_section(checkpoint.backbone), _head_section(checkpoint.head, checkpoint.arcmargin),
                    _optimizer_section(checkpoint.sgd_state), _schedule_section(checkpoint.schedule),
                    _log_section(checkpoint.log), _preprocess_section(checkpoint.preprocess)]:
        w.pack("Q", len(section))
        w.buffer.write(section)
    return w.getvalue()

def decode_checkpoint(data):
    """ Parses AGRC bytes

        :raises FormatError: On a bad magic, an unsupported version, truncation or trailing bytes

        :rtype: Checkpoint
    """
    r = _Reader(data, "checkpoint")
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    sections = [_Reader(r.take(r.unpack("Q")), "checkpoint section") for _ in range(6)]
    r.done()
    backbone, head, optimizer, schedule, log, preprocess = sections

    patch, stride, channels, seed = backbone.unpack("IIIQ")
    projection = backbone.floats(channels, 3 * patch * patch)
    projection.setflags(write = False)
    backbone.done()

    dim, head_channels, classes = head.unpack("III")
    tensors = dict(gem_p = head.floats(1), W_emb = head.floats(dim, head_channels),
                   b_emb = head.floats(dim), W_cls = head.floats(classes, dim))
    s, m, eps = head.unpack("fff")
    head.done()

    velocity = {}
    if optimizer.unpack("I") != len(HEAD_TENSORS):
        raise FormatError("Checkpoint optimizer section does not list every head tensor")
    for name in HEAD_TENSORS:
        ndim = optimizer.unpack("I")
        shape = optimizer.unpack(f"{ndim}I") if ndim else ()
        if isinstance(shape, int): shape = (shape,)
        velocity[name] = optimizer.floats(*shape)
    optimizer.done()

    state = None
    if schedule.unpack("B"):
        (kind, lr0, lr, epoch, total, best, since, patience, threshold, decay, bump, decays, margin_index) = schedule.unpack("BffIIfIIffBII")
        margins = schedule.floats(schedule.unpack("I"))
        state = ScheduleState(kind = SCHEDULERS[kind], lr0 = lr0, lr = lr, total_epochs = total,
                              margin_schedule = tuple(float(value) for value in margins), epoch = epoch,
                              margin_index = margin_index, best_loss = best, epochs_since_improve = since,
                              patience = patience, threshold = threshold, decay_factor = decay,
                              resolution_bump_on_first_decay = bool(bump), decays = decays)
    schedule.done()

    records = [EpochRecord(*log.unpack("IfffI")) for _ in range(log.unpack("I"))]
    log.done()

    crop_ratio, *mean, train_resolution, test_resolution = preprocess.unpack("ffffII")
    preprocess.done()

    return Checkpoint(
        backbone = BackboneParams(patch = patch, stride = stride, channels = channels, seed = seed, projection = projection),
        head = HeadParams(**tensors),
        arcmargin = ArcMarginConfig(s = s, m = m, cos_clamp_eps = eps),
        sgd_state = SgdState(velocity),
        schedule = state,
        log = records,
        preprocess = PreprocessConfig(crop_ratio = crop_ratio, mean = tuple(mean),
                                      train_resolution = train_resolution, test_resolution = test_resolution),
        )

def save_checkpoint(path, checkpoint):
    atomic_write(path, encode_checkpoint(checkpoint))
    logger.info("Saved checkpoint %s (%d epochs logged)", path, len(checkpoint.log))

def load_checkpoint(path):
    return decode_checkpoint(pathlib.Path(path).read_bytes())

## Descriptor sets

def encode_descriptors(descriptors):
    """ Serializes a DescriptorSet to the DSC1 byte layout

        :rtype: bytes
    """
    vectors = np.asarray(descriptors.vectors)
    w = _Writer()
    w.buffer.write(DESCRIPTOR_MAGIC)
    w.pack("IIIB", DESCRIPTOR_VERSION, vectors.shape[0], vectors.shape[1], descriptors.normalized)
    w.floats(vectors)
    for _id in descriptors.ids:
        w.string(_id)
    w.string(descriptors.model_tag)
    return w.getvalue()

def decode_descriptors(data, validate = True):
    """ Parses DSC1 bytes

        :param validate: Check the DescriptorSet invariants, defaults to True (image dumps are not unit norm)

        :raises FormatError: On a bad magic, an unsupported version, truncation or trailing bytes

        :rtype: DescriptorSet
    """
    r = _Reader(data, "descriptor file")
    r.header(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION)
    count, dim, normalized = r.unpack("IIB")
    vectors = r.floats(count, dim)
    ids = tuple(r.string() for _ in range(count))
    model_tag = r.string()
    r.done()
    return DescriptorSet(ids = ids, vectors = vectors, normalized = bool(normalized), model_tag = model_tag, validate = validate)

def save_descriptors(path, descriptors):
    atomic_write(path, encode_descriptors(descriptors))
    logger.info("Saved %d descriptors of dimension %d to %s", *descriptors.vectors.shape, path)

def load_descriptors(path, validate = True):
    return decode_descriptors(pathlib.Path(path).read_bytes(), validate = validate)

def save_image_dump(path, samples):
    """ Writes rendered samples in the DSC1 container: one row per channel (3 rows per image, ids "<id>/<channel>"),
            each row the H*W pixels of that channel flattened row-major. The model tag "images@<H>x<W>" keeps the
            shape so that load_image_dump can restore the planes.

        :raises FormatError: If there are no samples or they do not share one shape
    """
    if not samples:
        raise FormatError(f"No images to dump to {path}")
    _, height, width = samples[0].pixels.shape
    rows, ids = [], []
    for sample in samples:
        if sample.pixels.shape != (3, height, width):
            raise FormatError(f"Image {sample.id} is {sample.pixels.shape}, expected {(3, height, width)}")
        for channel, plane in enumerate(sample.pixels):
            rows.append(plane.reshape(-1))
            ids.append(f"{sample.id}/{channel}")
    dump = DescriptorSet(ids = tuple(ids), vectors = np.stack(rows).astype(np.float32), normalized = False,
                         model_tag = f"images@{height}x{width}", validate = False)
    save_descriptors(path, dump)

def load_image_dump(path):
    """ Reads an image dump back

        :raises FormatError: If the tag does not give the image shape or the rows do not fit it

        :return: Image id to its (3 x H x W) pixels, in file order
        :rtype: Dict[str, numpy.ndarray]
    """
    dump = load_descriptors(path, validate = False)
    if not (match := IMAGEDUMP_TAG_RE.match(dump.model_tag)):
        raise FormatError(f"{path} is not an image dump (tag '{dump.model_tag}')")
    height, width = int(match.group("height")), int(match.group("width"))
    if dump.dim != height * width or len(dump) % 3:
        raise FormatError(f"{path}: {len(dump)} rows of {dump.dim} values do not hold {height}x{width} RGB images")
    return {dump.ids[start].rsplit("/", 1)[0]: dump.vectors[start:start + 3].reshape(3, height, width)
            for start in range(0, len(dump), 3)}

## CSV

def _csv_text(header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator = "\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()

def _csv_rows(path, header):
    with open(path, "r", encoding = "utf-8", newline = "") as f:
        reader = csv.reader(f)
        if tuple(next(reader, ())) != tuple(header):
            raise FormatError(f"{path} does not start with the header {','.join(header)}")
        return [row for row in reader if row]

def _parse_rows(path, header, parse, rows = None):
    """ Applies parse to the cells of every data row

        :raises FormatError: Naming the file and the line of a row with the wrong number of cells or an unparsable cell
    """
    parsed = []
    for number, row in enumerate(_csv_rows(path, header) if rows is None else rows, start = 2):
        if len(row) != len(header):
            raise FormatError(f"{path} line {number}: expected {len(header)} columns, got {len(row)}")
        try:
            parsed.append(parse(*row))
        except ValueError as e:
            raise FormatError(f"{path} line {number}: {e}") from e
    return parsed

def _float(value):
    return repr(float(value))

def save_manifest(path, manifest):
    atomic_write(path, _csv_text(MANIFEST_COLUMNS, [(row.id, row.label, row.split, row.seed) for row in manifest.rows]))

def load_manifest(path, dataset_seed):
    rows = _parse_rows(path, MANIFEST_COLUMNS, lambda _id, label, split, seed: ManifestRow(_id, int(label), split, int(seed)))
    return DatasetManifest(rows, dataset_seed)

def save_ground_truth(path, ground_truth):
    """ Writes query_id,relevant_ids with the relevant ids sorted and space separated """
    atomic_write(path, _csv_text(GROUNDTRUTH_COLUMNS, [(query, " ".join(sorted(relevant))) for query, relevant in ground_truth.items()]))

def load_ground_truth(path):
    return {query: set(relevant.split()) for query, relevant in _csv_rows(path, GROUNDTRUTH_COLUMNS)}

def save_stage_log(path, records):
    atomic_write(path, _csv_text(STAGELOG_COLUMNS, [(r.epoch, _float(r.loss), _float(r.lr), _float(r.margin), r.resolution) for r in records]))

def load_stage_log(path):
    return _parse_rows(path, STAGELOG_COLUMNS, lambda epoch, loss, lr, margin, resolution:
                       EpochRecord(int(epoch), float(loss), float(lr), float(margin), int(resolution)))

def save_results(path, results):
    rows = [(result.query_id, rank, index_id, _float(score))
            for result in results for rank, (index_id, score) in enumerate(result.ranked, start = 1)]
    atomic_write(path, _csv_text(RESULTS_COLUMNS, rows))

def load_results(path):
    """ Reads results back, keeping the query order of the file """
    ranked = {}
    for query_id, rank, index_id, score in _parse_rows(path, RESULTS_COLUMNS, lambda query_id, rank, index_id, score:
                                                       (query_id, int(rank), index_id, float(score))):
        ranked.setdefault(query_id, []).append((rank, index_id, score))
    return [RetrievalResult(query_id, [(index_id, score) for _, index_id, score in sorted(entries)])
            for query_id, entries in ranked.items()]

def eval_summary(report):
    return f"mAP@{report.k}={report.map_at_100:.6f}"

def save_eval_report(path, report):
    """ Writes query_id,ap,relevant_count followed by the summary line "mAP@100=<value>" """
    text = _csv_text(EVAL_COLUMNS, [(score.query_id, _float(score.ap), score.relevant_count) for score in report.per_query])
    atomic_write(path, text + eval_summary(report) + "\n")

def load_eval_report(path, k = DEFAULT_K):
    rows = _csv_rows(path, EVAL_COLUMNS)
    if rows and len(rows[-1]) == 1 and rows[-1][0].startswith("mAP@"):
        rows = rows[:-1]
    scores = _parse_rows(path, EVAL_COLUMNS, lambda query_id, ap, count: QueryScore(query_id, float(ap), int(count)), rows = rows)
    return EvalReport.from_scores(scores, k = k)
