"""File formats

MSEQ: a little-endian binary tensor container

    magic     4 bytes   b'MSEQ'
    version   u32       1
    dtype     u8        1 = float32, 2 = float64, 3 = uint8
    ndim      u8
    reserved  u16       0
    dims      ndim x u64
    payload   row-major data

ParamFile: UTF-8 text holding LgssmParams

    lgssm-params v1
    # comment
    A
    2 2
    0.5 0.0
    0.0 0.5
    ...

with one keyed block per parameter (A, Q, C, R, mu0, Sigma0), each a
"rows cols" line followed by the rows. mu0 is written as a column.
"""

from pathlib import Path
import re
import struct
from typing import Callable

import numpy as np
from PIL import Image

from motionssm.model.lgssm import LgssmParams
from motionssm.model.serializable import ValidationError
from motionssm.typing import PathLike

MSEQ_MAGIC = b'MSEQ'
MSEQ_VERSION = 1
MSEQ_HEADER = struct.Struct('<4sIBBH')
MSEQ_DTYPES = {
    1: np.dtype('<f4'),
    2: np.dtype('<f8'),
    3: np.dtype('u1'),
}
MSEQ_CODES = {v: k for k, v in MSEQ_DTYPES.items()}

PARAMS_HEADER = 'lgssm-params v1'
PARAMS_KEYS = ('A', 'Q', 'C', 'R', 'mu0', 'Sigma0')

ArrayLoader = Callable[[PathLike], np.ndarray]


class MseqFormatError(ValidationError):
    pass


class ParamFileError(ValidationError):
    pass


def write_mseq(path: PathLike, array: np.ndarray):
    array = np.asarray(array)
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)

    dtype = array.dtype.newbyteorder('<')
    if dtype not in MSEQ_CODES:
        msg = f'MSEQ cannot store arrays of dtype {array.dtype}'
        raise MseqFormatError(msg)

    if array.ndim > 255:
        raise MseqFormatError('MSEQ supports at most 255 dimensions')

    with open(path, 'wb') as wf:
        wf.write(
            MSEQ_HEADER.pack(
                MSEQ_MAGIC, MSEQ_VERSION, MSEQ_CODES[dtype], array.ndim, 0
            )
        )
        wf.write(struct.pack(f'<{array.ndim}Q', *array.shape))
        wf.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_mseq(path: PathLike) -> np.ndarray:
    with open(path, 'rb') as rf:
        data = rf.read()

    if len(data) < MSEQ_HEADER.size:
        msg = f'{path}: file too short to be an MSEQ file'
        raise MseqFormatError(msg)

    magic, version, code, ndim, reserved = MSEQ_HEADER.unpack_from(data)
    if magic != MSEQ_MAGIC:
        msg = f'{path}: bad magic bytes {magic!r}, not an MSEQ file'
        raise MseqFormatError(msg)

    if version != MSEQ_VERSION:
        msg = f'{path}: unsupported MSEQ version {version}'
        raise MseqFormatError(msg)

    if code not in MSEQ_DTYPES:
        msg = f'{path}: unknown MSEQ dtype code {code}'
        raise MseqFormatError(msg)

    if reserved != 0:
        msg = f'{path}: MSEQ reserved header field must be 0'
        raise MseqFormatError(msg)

    offset = MSEQ_HEADER.size
    dims_size = 8 * ndim
    if len(data) < offset + dims_size:
        msg = f'{path}: truncated MSEQ header'
        raise MseqFormatError(msg)

    shape = struct.unpack_from(f'<{ndim}Q', data, offset)
    offset += dims_size

    dtype = MSEQ_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.uint64)) * dtype.itemsize
    if len(data) - offset != expected:
        msg = (
            f'{path}: MSEQ payload has {len(data) - offset} bytes, '
            f'expected {expected} for shape {shape}'
        )
        raise MseqFormatError(msg)

    array = np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape)
    # Return native byte order and a writable array
    return array.astype(dtype.newbyteorder('='))


def _format_block(name: str, matrix: np.ndarray) -> list[str]:
    lines = [name, f'{matrix.shape[0]} {matrix.shape[1]}']
    for row in matrix:
        lines.append(' '.join(format(float(x), '.17g') for x in row))

    return lines


def format_params(params: LgssmParams) -> str:
    lines = [PARAMS_HEADER]
    for key in PARAMS_KEYS:
        matrix = getattr(params, key)
        if key == 'mu0':
            matrix = matrix[:, None]

        lines.extend(_format_block(key, matrix))

    return '\n'.join(lines) + '\n'


def parse_params(text: str, source: str = '<string>') -> LgssmParams:
    lines = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if line:
            lines.append((number, line))

    if not lines or lines[0][1] != PARAMS_HEADER:
        msg = f'{source}: missing "{PARAMS_HEADER}" header line'
        raise ParamFileError(msg)

    blocks = {}
    i = 1
    while i < len(lines):
        number, key = lines[i]
        if key not in PARAMS_KEYS:
            msg = f'{source}:{number}: unknown parameter key {key!r}'
            raise ParamFileError(msg)

        if key in blocks:
            msg = f'{source}:{number}: duplicate parameter key {key!r}'
            raise ParamFileError(msg)

        try:
            number, dims = lines[i + 1]
            rows, cols = (int(x) for x in dims.split())
            if rows < 0 or cols < 0:
                raise ValueError(dims)

            values = []
            for number, row in lines[i + 2 : i + 2 + rows]:
                parsed = [float(x) for x in row.split()]
                if len(parsed) != cols:
                    raise ValueError(row)

                values.append(parsed)

            if len(values) != rows:
                raise ValueError('truncated block')
        except (IndexError, ValueError) as e:
            msg = f'{source}:{number}: malformed {key} block ({e})'
            raise ParamFileError(msg) from e

        blocks[key] = np.array(values, dtype=np.float64).reshape(rows, cols)
        i += 2 + rows

    missing = [k for k in PARAMS_KEYS if k not in blocks]
    if missing:
        msg = f'{source}: missing parameter block(s) {missing}'
        raise ParamFileError(msg)

    try:
        return LgssmParams(**blocks)
    except ValidationError as e:
        raise ParamFileError(f'{source}: {e}') from e


def write_params(path: PathLike, params: LgssmParams):
    with open(path, 'w', encoding='utf-8') as wf:
        wf.write(format_params(params))


def read_params(path: PathLike) -> LgssmParams:
    with open(path, 'r', encoding='utf-8') as rf:
        return parse_params(rf.read(), str(path))


def identify_loader_function(path: PathLike) -> ArrayLoader:
    extension = Path(path).suffix[1:].lower()
    for regex, func in CUSTOM_READERS.items():
        if re.match(regex, extension):
            return func

    # Default to MSEQ if nothing else matches
    return read_mseq


def load_array(path: PathLike) -> np.ndarray:
    # Automatically identify the file type and load it
    func = identify_loader_function(path)
    return func(path)


def load_image_file(path: PathLike) -> np.ndarray:
    # Open with Pillow. Color images are reduced to luminance.
    with Image.open(path) as pil_img:
        if pil_img.mode not in ('L', 'I', 'I;16', 'F'):
            pil_img = pil_img.convert('L')

        img = np.asarray(pil_img)

    return img.astype(np.float32)


# The key for these custom readers is the regular expression
# that the extension should match.
CUSTOM_READERS = {
    r'^mseq$': read_mseq,
    r'^(tiff?|png)$': load_image_file,
}

# Compile the regular expressions
CUSTOM_READERS = {re.compile(k): v for k, v in CUSTOM_READERS.items()}
