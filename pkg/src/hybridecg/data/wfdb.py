"""Reader and writer for WFDB header (.hea) and format-16 signal (.dat) files.

Format 16 stores 16-bit little-endian two's-complement samples, interleaved by
channel within each frame. Physical value in mV is ``(raw - baseline) / gain``.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, FormatError

SENTINEL = -32768
DEFAULT_GAIN = 200.0

_GAIN_RE = re.compile(r"^(?P<gain>[-+0-9.eE]+)(?:\((?P<baseline>-?\d+)\))?(?:/(?P<units>\S+))?$")


class TruncationError(FormatError):
    pass


class InvalidSampleError(DataError):
    pass


class UnsupportedFormatError(FormatError):
    pass


@dataclass
class SignalSpec:
    file_name: str
    fmt: int = 16
    gain: float = DEFAULT_GAIN
    baseline: int = 0
    units: str = "mV"
    adc_resolution: int = 16
    adc_zero: int = 0
    initial_value: int = 0
    checksum: int = 0
    block_size: int = 0
    description: str = ""


@dataclass
class WfdbHeader:
    record_name: str
    n_signals: int
    sampling_rate: float
    n_samples: int
    signals: list = field(default_factory=list)

    @property
    def gains(self):
        return np.array([s.gain for s in self.signals], dtype=np.float64)

    @property
    def baselines(self):
        return np.array([s.baseline for s in self.signals], dtype=np.float64)

    @property
    def lead_names(self):
        return [s.description for s in self.signals]


def _int(tok, what, lineno):
    try:
        return int(tok)
    except ValueError:
        raise FormatError(f"expected integer {what}, got {tok!r}", offset=f"line {lineno}") from None


def _parse_record_line(tokens, lineno):
    if len(tokens) < 2:
        raise FormatError("record line needs at least a name and signal count", offset=f"line {lineno}")
    name = tokens[0].split("/")[0]
    n_signals = _int(tokens[1], "signal count", lineno)
    fs = 250.0
    n_samples = 0
    if len(tokens) > 2:
        fs_tok = tokens[2].split("/")[0].split("(")[0]
        try:
            fs = float(fs_tok)
        except ValueError:
            raise FormatError(f"bad sampling frequency {tokens[2]!r}", offset=f"line {lineno}") from None
    if len(tokens) > 3:
        n_samples = _int(tokens[3], "sample count", lineno)
    return name, n_signals, fs, n_samples


def _parse_signal_line(tokens, lineno):
    if len(tokens) < 2:
        raise FormatError("signal line needs a file name and format", offset=f"line {lineno}")
    fmt_tok = re.match(r"^(\d+)", tokens[1])
    if not fmt_tok:
        raise FormatError(f"bad storage format {tokens[1]!r}", offset=f"line {lineno}")
    fmt = int(fmt_tok.group(1))
    if fmt != 16:
        raise UnsupportedFormatError(f"storage format {fmt} is not supported (only 16)",
                                     offset=f"line {lineno}")
    sig = SignalSpec(file_name=tokens[0], fmt=fmt)
    baseline = None
    if len(tokens) > 2:
        m = _GAIN_RE.match(tokens[2])
        if not m:
            raise FormatError(f"bad gain field {tokens[2]!r}", offset=f"line {lineno}")
        try:
            gain = float(m.group("gain"))
        except ValueError:
            raise FormatError(f"bad gain value {tokens[2]!r}", offset=f"line {lineno}") from None
        if gain < 0:
            raise FormatError(f"negative gain {gain}", offset=f"line {lineno}")
        sig.gain = gain if gain > 0 else DEFAULT_GAIN
        if m.group("baseline") is not None:
            baseline = int(m.group("baseline"))
        if m.group("units"):
            sig.units = m.group("units")
    ints = ["adc_resolution", "adc_zero", "initial_value", "checksum", "block_size"]
    for attr, tok in zip(ints, tokens[3:8]):
        setattr(sig, attr, _int(tok, attr.replace("_", " "), lineno))
    sig.description = " ".join(tokens[8:])
    sig.baseline = baseline if baseline is not None else sig.adc_zero
    return sig


def parse_wfdb_header(data):
    """Parse header text (str or bytes) into a :class:`WfdbHeader`."""
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError("header is not ASCII text", offset=exc.start) from exc
    lines = [(n, ln.strip()) for n, ln in enumerate(data.splitlines(), 1)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise FormatError("empty header", offset="line 1")
    lineno, first = lines[0]
    name, n_signals, fs, n_samples = _parse_record_line(first.split(), lineno)
    if n_signals < 1:
        raise FormatError(f"signal count must be positive, got {n_signals}", offset=f"line {lineno}")
    sig_lines = lines[1:1 + n_signals]
    if len(sig_lines) < n_signals:
        raise FormatError(f"header declares {n_signals} signals but has {len(sig_lines)} signal lines",
                          offset=f"line {lineno}")
    signals = [_parse_signal_line(ln.split(), n) for n, ln in sig_lines]
    return WfdbHeader(name, n_signals, fs, n_samples, signals)


def _fmt_number(x):
    return f"{x:g}" if float(x) != int(x) else f"{float(x):.1f}"


def write_wfdb_header(header):
    """Serialise a header in the layout PTB-XL uses."""
    lines = [f"{header.record_name} {header.n_signals} {header.sampling_rate:g} {header.n_samples}"]
    for s in header.signals:
        lines.append(
            f"{s.file_name} {s.fmt} {_fmt_number(s.gain)}({s.baseline})/{s.units} {s.adc_resolution} "
            f"{s.adc_zero} {s.initial_value} {s.checksum} {s.block_size} {s.description}".rstrip()
        )
    return "\n".join(lines) + "\n"


def parse_wfdb_raw(data, header):
    """Raw int16 samples, shape (n_samples, n_signals)."""
    expected = header.n_samples * header.n_signals * 2
    if len(data) != expected:
        raise TruncationError(f"signal file has {len(data)} bytes, header implies {expected}",
                              offset=min(len(data), expected))
    raw = np.frombuffer(data, dtype="<i2").reshape(header.n_samples, header.n_signals)
    if (raw == SENTINEL).any():
        frame, chan = np.argwhere(raw == SENTINEL)[0]
        raise InvalidSampleError(f"invalid-sample sentinel at frame {frame}, signal {chan}")
    return raw


def parse_wfdb_signal(data, header):
    """Physical signal in mV, shape (n_samples, n_signals), float64."""
    raw = parse_wfdb_raw(data, header)
    return (raw.astype(np.float64) - header.baselines) / header.gains


def encode_wfdb_signal(raw):
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError("raw samples must be (n_samples, n_signals)")
    if raw.min(initial=0) < -32768 or raw.max(initial=0) > 32767:
        raise ValueError("samples exceed the 16-bit range")
    return raw.astype("<i2").tobytes()


def make_header(record_name, raw, sampling_rate=100.0, gain=1000.0, baseline=0, lead_names=None):
    """Header describing ``raw`` (n_samples, n_signals) stored in ``<record_name>.dat``."""
    n_samples, n_signals = raw.shape
    lead_names = lead_names or [f"S{i}" for i in range(n_signals)]
    signals = []
    for ch in range(n_signals):
        col = raw[:, ch].astype(np.int64)
        checksum = int(col.sum()) & 0xFFFF
        if checksum >= 0x8000:
            checksum -= 0x10000
        signals.append(SignalSpec(
            file_name=f"{record_name}.dat", fmt=16, gain=gain, baseline=baseline, units="mV",
            adc_resolution=16, adc_zero=0, initial_value=int(col[0]) if n_samples else 0,
            checksum=checksum, block_size=0, description=lead_names[ch],
        ))
    return WfdbHeader(record_name, n_signals, sampling_rate, n_samples, signals)


def write_record(directory, record_name, raw, **header_kwargs):
    """Write ``<record_name>.hea`` and ``.dat`` into ``directory``; returns the header."""
    header = make_header(record_name, raw, **header_kwargs)
    with open(f"{directory}/{record_name}.hea", "w") as fh:
        fh.write(write_wfdb_header(header))
    with open(f"{directory}/{record_name}.dat", "wb") as fh:
        fh.write(encode_wfdb_signal(raw))
    return header


def read_record(path_stem):
    """Read ``<path_stem>.hea``/``.dat``; returns ``(header, signal_mV)``."""
    with open(f"{path_stem}.hea", "rb") as fh:
        header = parse_wfdb_header(fh.read())
    with open(f"{path_stem}.dat", "rb") as fh:
        data = fh.read()
    return header, parse_wfdb_signal(data, header)
