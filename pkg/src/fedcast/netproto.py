"""Wire protocol and loopback networking for distributed rounds.

Frames are ``u32 length (LE) | u8 type | payload``; the length counts the
type byte plus payload. Model parameters travel as a self-describing blob:
a fixed header (magic, payload version, round, architecture) followed by
each tensor in canonical alphabetical order as
``u16 name length | name | u32 rank | u32 dims... | raw values (LE)``.
Version 1 carries float32 values (compact storage); version 2 carries
float64 and is used for round exchange, which keeps networked training
bit-identical to the in-process simulator.

Every malformed input raises ProtocolError — the coordinator drops the
offending connection and keeps serving.
"""

from __future__ import annotations

import logging
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .cluster import ClusterModel, fit_kmeans, sweep_k
from .data import ConsumptionSeries, SummaryVector, daily_means, windowed_dataset, train_test_split
from .errors import ConfigError, DataError, ProtocolError
from .federated import (
    ClientUpdate,
    ClusterTraining,
    ExperimentConfig,
    derive_train_seed,
    run_cluster_rounds,
)
from .neural import ModelConfig, SgdConfig, tensor_order, tensor_shapes, train_local

logger = logging.getLogger(__name__)

MSG_HELLO = 1
MSG_ASSIGN = 2
MSG_GLOBAL_WEIGHTS = 3
MSG_LOCAL_WEIGHTS = 4
MSG_ROUND_DONE = 5
MSG_SHUTDOWN = 6
MSG_ERROR = 7

_MSG_TYPES = frozenset(range(MSG_HELLO, MSG_ERROR + 1))

MAX_FRAME_BYTES = 64 * 1024 * 1024

BLOB_MAGIC = b"FLW1"
BLOB_V_F32 = 1
BLOB_V_F64 = 2
_BLOB_DTYPES = {BLOB_V_F32: np.dtype("<f4"), BLOB_V_F64: np.dtype("<f8")}

_BLOB_HEADER = struct.Struct("<4sIIBIIIII")
_CELL_CODES = {"lstm": 1, "gru": 2}
_CELL_NAMES = {v: k for k, v in _CELL_CODES.items()}

_ASSIGN = struct.Struct("<IQBIIIdIIdd")
_ROUND_DONE = struct.Struct("<IId")
_MAX_NAME_LEN = 64


# ---------------------------------------------------------------------------
# weight blob codec


@dataclass(frozen=True)
class WeightMessage:
    """A decoded parameter blob."""

    model: ModelConfig
    params: dict[str, np.ndarray]
    round_idx: int
    version: int


def serialize_weights(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    round_idx: int,
    version: int = BLOB_V_F64,
) -> bytes:
    """Encode parameters for the wire or disk."""
    if version not in _BLOB_DTYPES:
        raise ProtocolError(f"unsupported blob version {version}")
    if round_idx < 0:
        raise ProtocolError("round index must be non-negative")
    expected = tensor_shapes(cfg)
    if set(params) != set(expected):
        raise ProtocolError(
            f"parameter names {sorted(params)} do not match cell {cfg.cell!r}"
        )
    dtype = _BLOB_DTYPES[version]
    parts = [
        _BLOB_HEADER.pack(
            BLOB_MAGIC,
            version,
            round_idx,
            _CELL_CODES[cfg.cell],
            cfg.input_size,
            cfg.hidden_size,
            cfg.lookback,
            cfg.horizon,
            len(expected),
        )
    ]
    for name in tensor_order(cfg.cell):
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.shape != expected[name]:
            raise ProtocolError(
                f"tensor {name}: expected shape {expected[name]}, got {arr.shape}"
            )
        name_b = name.encode("ascii")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def deserialize_weights(blob: bytes) -> WeightMessage:
    """Decode a parameter blob; any inconsistency raises ProtocolError."""
    if len(blob) < _BLOB_HEADER.size:
        raise ProtocolError(f"blob too short ({len(blob)} bytes)")
    magic, version, round_idx, cell_code, input_size, hidden, lookback, horizon, count = (
        _BLOB_HEADER.unpack_from(blob, 0)
    )
    if magic != BLOB_MAGIC:
        raise ProtocolError(f"bad blob magic {magic!r}")
    if version not in _BLOB_DTYPES:
        raise ProtocolError(f"unsupported blob version {version}")
    if cell_code not in _CELL_NAMES:
        raise ProtocolError(f"unknown cell code {cell_code}")
    try:
        cfg = ModelConfig(
            cell=_CELL_NAMES[cell_code],
            hidden_size=hidden,
            lookback=lookback,
            horizon=horizon,
            input_size=input_size,
        )
    except ConfigError as exc:
        raise ProtocolError(f"bad architecture header: {exc}") from None
    order = tensor_order(cfg.cell)
    if count != len(order):
        raise ProtocolError(
            f"blob declares {count} tensors; cell {cfg.cell!r} has {len(order)}"
        )
    expected = tensor_shapes(cfg)
    dtype = _BLOB_DTYPES[version]
    params: dict[str, np.ndarray] = {}
    off = _BLOB_HEADER.size
    for name in order:
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            if name_len > _MAX_NAME_LEN:
                raise ProtocolError(f"tensor name length {name_len} too large")
            if len(blob) < off + name_len:
                raise ProtocolError("truncated tensor name")
            got = blob[off : off + name_len].decode("ascii")
            off += name_len
            if got != name:
                raise ProtocolError(f"expected tensor {name!r}, found {got!r}")
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            if rank != len(expected[name]):
                raise ProtocolError(f"tensor {name}: bad rank {rank}")
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            if tuple(dims) != expected[name]:
                raise ProtocolError(
                    f"tensor {name}: dims {dims} do not match {expected[name]}"
                )
            nbytes = math.prod(dims) * dtype.itemsize
            if len(blob) < off + nbytes:
                raise ProtocolError(f"tensor {name}: truncated payload")
            flat = np.frombuffer(blob, dtype=dtype, count=math.prod(dims), offset=off)
            off += nbytes
        except struct.error:
            raise ProtocolError("truncated blob") from None
        except UnicodeDecodeError:
            raise ProtocolError("tensor name is not ascii") from None
        params[name] = flat.astype(np.float64).reshape(expected[name])
    if off != len(blob):
        raise ProtocolError(f"{len(blob) - off} trailing bytes after last tensor")
    return WeightMessage(model=cfg, params=params, round_idx=round_idx, version=version)


# ---------------------------------------------------------------------------
# framing


def send_frame(sock: socket.socket, msg_type: int, payload: bytes = b"") -> None:
    if msg_type not in _MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    length = 1 + len(payload)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    sock.sendall(struct.pack("<IB", length, msg_type) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(min(remaining, 1 << 20))
        except socket.timeout:
            raise ProtocolError(f"timed out reading {n} bytes") from None
        except OSError as exc:
            raise ProtocolError(f"socket error: {exc}") from None
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket, max_frame: int = MAX_FRAME_BYTES) -> tuple[int, bytes]:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    if not 1 <= length <= max_frame:
        raise ProtocolError(f"invalid frame length {length}")
    body = _recv_exact(sock, length)
    msg_type = body[0]
    if msg_type not in _MSG_TYPES:
        raise ProtocolError(f"unknown message type {msg_type}")
    return msg_type, body[1:]


# ---------------------------------------------------------------------------
# message payloads


def encode_hello(client_id: str, means: np.ndarray) -> bytes:
    name = client_id.encode("utf-8")
    if not 1 <= len(name) <= 255:
        raise ProtocolError("client id must encode to 1..255 bytes")
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 1 or means.size == 0:
        raise ProtocolError("hello needs a non-empty daily-means vector")
    return (
        struct.pack("<H", len(name))
        + name
        + struct.pack("<I", means.size)
        + means.astype("<f8").tobytes()
    )


def decode_hello(payload: bytes) -> tuple[str, np.ndarray]:
    try:
        (name_len,) = struct.unpack_from("<H", payload, 0)
        name = payload[2 : 2 + name_len].decode("utf-8")
        if len(payload) < 2 + name_len + 4:
            raise ProtocolError("truncated hello")
        (n_days,) = struct.unpack_from("<I", payload, 2 + name_len)
        off = 2 + name_len + 4
        if len(payload) != off + 8 * n_days:
            raise ProtocolError("hello length does not match day count")
        means = np.frombuffer(payload, dtype="<f8", count=n_days, offset=off)
    except (struct.error, UnicodeDecodeError):
        raise ProtocolError("malformed hello") from None
    if not name or n_days == 0:
        raise ProtocolError("hello missing client id or data")
    means = means.astype(np.float64)
    if not np.all(np.isfinite(means)) or np.any(means < 0):
        raise ProtocolError("hello daily means must be finite and non-negative")
    return name, means


def encode_assign(cluster_id: int, seed: int, model: ModelConfig, sgd: SgdConfig, train_fraction: float) -> bytes:
    return _ASSIGN.pack(
        cluster_id,
        seed,
        _CELL_CODES[model.cell],
        model.hidden_size,
        model.lookback,
        model.horizon,
        sgd.learning_rate,
        sgd.batch_size,
        sgd.local_epochs,
        sgd.ew_base,
        train_fraction,
    )


def decode_assign(payload: bytes) -> tuple[int, int, ModelConfig, SgdConfig, float]:
    try:
        (cluster_id, seed, cell_code, hidden, lookback, horizon,
         lr, batch, epochs, ew_base, train_fraction) = _ASSIGN.unpack(payload)
    except struct.error:
        raise ProtocolError("malformed assignment") from None
    if cell_code not in _CELL_NAMES:
        raise ProtocolError(f"unknown cell code {cell_code}")
    try:
        model = ModelConfig(
            cell=_CELL_NAMES[cell_code], hidden_size=hidden,
            lookback=lookback, horizon=horizon,
        )
        sgd = SgdConfig(
            learning_rate=lr, batch_size=batch, local_epochs=epochs, ew_base=ew_base
        )
    except ConfigError as exc:
        raise ProtocolError(f"bad assignment parameters: {exc}") from None
    if not 0.0 < train_fraction < 1.0:
        raise ProtocolError(f"bad train fraction {train_fraction}")
    return cluster_id, seed, model, sgd, train_fraction


def encode_local_weights(blob: bytes, loss: float, n_samples: int) -> bytes:
    return struct.pack("<I", len(blob)) + blob + struct.pack("<dQ", loss, n_samples)


def decode_local_weights(payload: bytes) -> tuple[bytes, float, int]:
    try:
        (blob_len,) = struct.unpack_from("<I", payload, 0)
        if len(payload) != 4 + blob_len + 16:
            raise ProtocolError("local-weights length mismatch")
        blob = payload[4 : 4 + blob_len]
        loss, n_samples = struct.unpack_from("<dQ", payload, 4 + blob_len)
    except struct.error:
        raise ProtocolError("malformed local weights") from None
    if not math.isfinite(loss):
        raise ProtocolError("non-finite reported loss")
    return blob, loss, n_samples


# ---------------------------------------------------------------------------
# coordinator


@dataclass(frozen=True)
class NetworkResult:
    """What a completed networked run produces on the coordinator."""

    cluster_model: ClusterModel
    membership: dict[str, int]
    trainings: dict[int, ClusterTraining]


@dataclass
class _Registered:
    client_id: str
    sock: socket.socket
    means: np.ndarray


class CoordinatorServer:
    """Synchronous federated coordinator over loopback-style TCP.

    Accepts ``expected_clients`` registrations, clusters them on their
    reported daily means, then drives the shared round loop per cluster,
    shipping parameters as float64 blobs. Connections that violate the
    protocol during registration are dropped without disturbing the run.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        expected_clients: int,
        host: str = "127.0.0.1",
        port: int = 0,
        frame_timeout: float = 60.0,
        registration_timeout: float = 120.0,
    ):
        if expected_clients < 1:
            raise ConfigError("expected_clients must be >= 1")
        self.cfg = cfg
        self.expected_clients = expected_clients
        self.frame_timeout = frame_timeout
        self.registration_timeout = registration_timeout
        self._stop = threading.Event()
        self._lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._lsock.bind((host, port))
        self._lsock.listen(16)
        self._lsock.settimeout(0.2)
        self.address: tuple[str, int] = self._lsock.getsockname()[:2]

    def stop(self) -> None:
        """Ask a running ``run()`` to wind down at the next checkpoint."""
        self._stop.set()

    def close(self) -> None:
        self._lsock.close()

    def _register(self) -> dict[str, _Registered]:
        registered: dict[str, _Registered] = {}
        deadline = time.monotonic() + self.registration_timeout
        while len(registered) < self.expected_clients:
            if self._stop.is_set():
                for reg in registered.values():
                    reg.sock.close()
                return {}
            if time.monotonic() > deadline:
                for reg in registered.values():
                    reg.sock.close()
                raise ProtocolError(
                    f"registration timed out with {len(registered)} of "
                    f"{self.expected_clients} clients"
                )
            try:
                conn, _addr = self._lsock.accept()
            except socket.timeout:
                continue
            conn.settimeout(self.frame_timeout)
            try:
                msg_type, payload = recv_frame(conn)
                if msg_type != MSG_HELLO:
                    raise ProtocolError(f"expected hello, got type {msg_type}")
                client_id, means = decode_hello(payload)
                if client_id in registered:
                    raise ProtocolError(f"duplicate client id {client_id!r}")
            except ProtocolError as exc:
                logger.debug("dropping connection: %s", exc)
                try:
                    send_frame(conn, MSG_ERROR, str(exc).encode("utf-8"))
                except OSError:
                    pass
                conn.close()
                continue
            registered[client_id] = _Registered(client_id, conn, means)
        return registered

    def _cluster(self, registered: dict[str, _Registered]) -> tuple[ClusterModel, dict[str, int]]:
        period = self.cfg.period_days
        summaries = []
        for cid in sorted(registered):
            means = registered[cid].means
            if means.size < period:
                raise DataError(
                    f"client '{cid}' reported {means.size} days; "
                    f"clustering needs {period}"
                )
            summaries.append(SummaryVector(building_id=cid, daily_means=means[:period]))
        if self.cfg.k is not None:
            model = fit_kmeans(summaries, self.cfg.k, seed=self.cfg.seed)
        else:
            sweep = sweep_k(summaries, self.cfg.k_min, self.cfg.k_max, seed=self.cfg.seed)
            model = sweep.models[sweep.best_k]
        return model, dict(model.labels)

    def _broadcast_error(self, registered: dict[str, _Registered], message: str) -> None:
        for reg in registered.values():
            try:
                send_frame(reg.sock, MSG_ERROR, message.encode("utf-8"))
            except OSError:
                pass
            reg.sock.close()

    def run(self) -> NetworkResult | None:
        """Serve one full training run; returns None if stopped early."""
        registered: dict[str, _Registered] = {}
        try:
            registered = self._register()
            if not registered:
                return None
            cluster_model, membership = self._cluster(registered)
            for cid in sorted(registered):
                reg = registered[cid]
                send_frame(
                    reg.sock,
                    MSG_ASSIGN,
                    encode_assign(
                        membership[cid],
                        self.cfg.seed,
                        self.cfg.model,
                        self.cfg.sgd,
                        self.cfg.train_fraction,
                    ),
                )
            trainings: dict[int, ClusterTraining] = {}
            for cluster_id in range(cluster_model.k):
                members = sorted(c for c, lab in membership.items() if lab == cluster_id)
                if not members:
                    continue
                executor = _SocketExecutor(
                    self.cfg.model,
                    {c: registered[c] for c in members},
                    cluster_id,
                )
                trainings[cluster_id] = run_cluster_rounds(
                    self.cfg.model,
                    members,
                    executor,
                    rounds=self.cfg.rounds,
                    clients_per_round=self.cfg.clients_per_round,
                    seed=self.cfg.seed,
                    cluster_id=cluster_id,
                )
            for reg in registered.values():
                try:
                    send_frame(reg.sock, MSG_SHUTDOWN)
                except OSError:
                    pass
                reg.sock.close()
            registered = {}
            return NetworkResult(
                cluster_model=cluster_model, membership=membership, trainings=trainings
            )
        except Exception as exc:
            self._broadcast_error(registered, f"coordinator fault: {exc}")
            raise
        finally:
            self.close()


class _SocketExecutor:
    """Round executor that ships work to connected clients."""

    def __init__(self, model: ModelConfig, members: dict[str, _Registered], cluster_id: int):
        self.model = model
        self.members = members
        self.cluster_id = cluster_id

    def __call__(
        self,
        round_idx: int,
        params: dict[str, np.ndarray],
        selected: list[str],
    ) -> dict[str, ClientUpdate]:
        blob = serialize_weights(self.model, params, round_idx, BLOB_V_F64)
        for cid in selected:
            send_frame(self.members[cid].sock, MSG_GLOBAL_WEIGHTS, blob)
        updates: dict[str, ClientUpdate] = {}
        for cid in selected:
            sock = self.members[cid].sock
            msg_type, payload = recv_frame(sock)
            if msg_type != MSG_LOCAL_WEIGHTS:
                raise ProtocolError(
                    f"client {cid!r}: expected local weights, got type {msg_type}"
                )
            reply_blob, loss, n_samples = decode_local_weights(payload)
            msg = deserialize_weights(reply_blob)
            if msg.version != BLOB_V_F64:
                raise ProtocolError(f"client {cid!r}: round reply must be float64")
            if msg.round_idx != round_idx:
                raise ProtocolError(
                    f"client {cid!r}: reply for round {msg.round_idx}, "
                    f"expected {round_idx}"
                )
            if msg.model != self.model:
                raise ProtocolError(f"client {cid!r}: architecture mismatch in reply")
            updates[cid] = ClientUpdate(
                params=msg.params, loss=loss, n_samples=n_samples
            )
        mean_loss = float(np.mean([updates[c].loss for c in selected]))
        done = _ROUND_DONE.pack(self.cluster_id, round_idx, mean_loss)
        for reg in self.members.values():
            send_frame(reg.sock, MSG_ROUND_DONE, done)
        return updates


# ---------------------------------------------------------------------------
# client


class FederatedClient:
    """One building's training participant.

    Connects, reports daily means, receives its cluster assignment and
    hyperparameters, then answers weight broadcasts with locally trained
    parameters until the coordinator shuts the session down.
    """

    def __init__(
        self,
        host: str,
        port: int,
        series: ConsumptionSeries,
        client_id: str | None = None,
        frame_timeout: float = 300.0,
        connect_retries: int = 25,
    ):
        self.host = host
        self.port = port
        self.series = series
        self.client_id = client_id or series.building_id
        self.frame_timeout = frame_timeout
        self.connect_retries = connect_retries
        self.rounds_trained = 0

    def _connect(self) -> socket.socket:
        last: Exception | None = None
        for _ in range(self.connect_retries):
            try:
                sock = socket.create_connection((self.host, self.port), timeout=10.0)
                sock.settimeout(self.frame_timeout)
                return sock
            except OSError as exc:
                last = exc
                time.sleep(0.1)
        raise ProtocolError(f"cannot connect to {self.host}:{self.port}: {last}")

    def run(self) -> None:
        sock = self._connect()
        try:
            send_frame(sock, MSG_HELLO, encode_hello(self.client_id, daily_means(self.series)))
            msg_type, payload = recv_frame(sock)
            if msg_type == MSG_ERROR:
                raise ProtocolError(f"coordinator: {payload.decode('utf-8', 'replace')}")
            if msg_type != MSG_ASSIGN:
                raise ProtocolError(f"expected assignment, got type {msg_type}")
            cluster_id, seed, model, sgd, train_fraction = decode_assign(payload)
            ds = windowed_dataset(self.series, model.lookback, model.horizon)
            train_rows, _ = train_test_split(ds, train_fraction)
            if train_rows.n_samples == 0:
                raise DataError(f"client '{self.client_id}' has no training samples")
            while True:
                msg_type, payload = recv_frame(sock)
                if msg_type == MSG_SHUTDOWN:
                    return
                if msg_type == MSG_ERROR:
                    raise ProtocolError(
                        f"coordinator: {payload.decode('utf-8', 'replace')}"
                    )
                if msg_type == MSG_ROUND_DONE:
                    continue
                if msg_type != MSG_GLOBAL_WEIGHTS:
                    raise ProtocolError(f"unexpected message type {msg_type}")
                msg = deserialize_weights(payload)
                if msg.model != model:
                    raise ProtocolError("broadcast architecture differs from assignment")
                train_seed = derive_train_seed(
                    seed, cluster_id, msg.round_idx, self.client_id
                )
                new_params, stats = train_local(
                    model,
                    msg.params,
                    train_rows.inputs,
                    train_rows.targets,
                    sgd,
                    train_seed,
                )
                reply = serialize_weights(model, new_params, msg.round_idx, BLOB_V_F64)
                send_frame(
                    sock,
                    MSG_LOCAL_WEIGHTS,
                    encode_local_weights(reply, stats.mean_loss, stats.n_samples),
                )
                self.rounds_trained += 1
        finally:
            sock.close()
