"""Versioned, layered attribute store with change-only patches.

Records live in building-block layers inside update regions. Writes are
staged with put/delete and become visible to history at commit time, which
bumps the region version by one and yields the ChangePatch for that step.
Replaying a region's patch history from version 0 reproduces its committed
record set exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Union

from .road import RoadNetwork

Scalar = Union[int, bool]
RecordKey = tuple["BuildingBlock", int, str]  # layer, segment, attribute

_MAGIC = b"MPS1"
_KIND_SNAPSHOT = 0x00
_KIND_PATCH = 0x01
_KIND_PATCH_LIST = 0x02
_OP_SET = 0x01
_OP_DELETE = 0x02
_TAG_INT = 0x01
_TAG_BOOL = 0x02
_TAG_ENUM = 0x03


class StoreError(ValueError):
    pass


class NothingStagedError(StoreError):
    pass


class VersionMismatchError(StoreError):
    """Patch does not chain onto the region's current version."""


class HistoryPrunedError(StoreError):
    """The requested patch chain is no longer retained."""


class BuildingBlock(IntEnum):
    ROUTING = 0
    LANE_GEOMETRY = 1
    TRAFFIC_INFO = 2
    POI = 3
    VOLATILE = 4
    GEOMETRY_3D = 5


# Attribute name -> (layer, wire value tag). Keeps serialization canonical:
# a decoded store re-encodes to identical bytes.
ATTRIBUTE_SCHEMA: dict[str, tuple[BuildingBlock, int]] = {
    "speed_limit": (BuildingBlock.TRAFFIC_INFO, _TAG_INT),
    "lane_count": (BuildingBlock.ROUTING, _TAG_INT),
    "route_type": (BuildingBlock.ROUTING, _TAG_ENUM),
    "is_tunnel": (BuildingBlock.ROUTING, _TAG_BOOL),
    "is_bridge": (BuildingBlock.ROUTING, _TAG_BOOL),
    "is_emergency_lane": (BuildingBlock.ROUTING, _TAG_BOOL),
}


def attribute_layer(attribute: str) -> BuildingBlock:
    try:
        return ATTRIBUTE_SCHEMA[attribute][0]
    except KeyError:
        raise StoreError(f"unknown attribute {attribute!r}") from None


@dataclass(frozen=True)
class UpdateRegion:
    """Identity and current version of one update region."""

    region_id: int
    version: int

    def __post_init__(self) -> None:
        if self.version < 0:
            raise StoreError("region version must be >= 0")


@dataclass(frozen=True)
class MapRecord:
    layer: BuildingBlock
    region: int
    segment: int
    attribute: str
    value: Scalar

    def key(self) -> RecordKey:
        return (self.layer, self.segment, self.attribute)


@dataclass(frozen=True)
class PatchOp:
    op: int  # _OP_SET or _OP_DELETE
    layer: BuildingBlock
    segment: int
    attribute: str
    value: Scalar | None = None


@dataclass(frozen=True)
class ChangePatch:
    region: int
    from_version: int
    to_version: int
    ops: tuple[PatchOp, ...]

    def __post_init__(self) -> None:
        if self.to_version != self.from_version + 1:
            raise StoreError("patch must advance the version by exactly 1")
        if not self.ops:
            raise StoreError("patch must contain at least one op")
        keys = [(o.layer, o.segment, o.attribute) for o in self.ops]
        if len(set(keys)) != len(keys):
            raise StoreError("duplicate (layer, key) within one patch")


@dataclass(frozen=True)
class RegionSnapshot:
    region: int
    version: int
    records: dict[RecordKey, Scalar]


class _Deleted:
    def __repr__(self) -> str:
        return "<deleted>"


_DELETED = _Deleted()


class MapStore:
    """Single-writer, multi-reader map database (writes externally serialized)."""

    def __init__(self) -> None:
        self._records: dict[int, dict[RecordKey, Scalar]] = {}
        self._staged: dict[int, dict[RecordKey, object]] = {}
        self._versions: dict[int, int] = {}
        self._history: dict[int, list[ChangePatch]] = {}
        self._key_region: dict[RecordKey, int] = {}

    # -- reads --------------------------------------------------------------

    def regions(self) -> list[int]:
        return sorted(set(self._versions) | set(self._staged))

    def version(self, region: int) -> int:
        return self._versions.get(region, 0)

    def update_region(self, region: int) -> UpdateRegion:
        return UpdateRegion(region_id=region, version=self.version(region))

    def get(
        self, layer: BuildingBlock, segment: int, attribute: str,
        region: int | None = None,
    ) -> Scalar | None:
        """Value at the current version, staged writes included."""
        key = (layer, segment, attribute)
        if region is None:
            region = self._key_region.get(key)
            if region is None:
                region = next(
                    (r for r, st in self._staged.items() if key in st), None
                )
            if region is None:
                return None
        staged = self._staged.get(region, {})
        if key in staged:
            val = staged[key]
            return None if val is _DELETED else val  # type: ignore[return-value]
        return self._records.get(region, {}).get(key)

    def region_of(self, layer: BuildingBlock, segment: int, attribute: str) -> int | None:
        return self._key_region.get((layer, segment, attribute))

    def record_set(self, region: int) -> dict[RecordKey, Scalar]:
        """Committed records only; staged writes are not part of a version."""
        return dict(self._records.get(region, {}))

    def snapshot(self, region: int) -> RegionSnapshot:
        return RegionSnapshot(
            region=region, version=self.version(region),
            records=self.record_set(region),
        )

    def history(self, region: int) -> list[ChangePatch]:
        return list(self._history.get(region, []))

    # -- writes -------------------------------------------------------------

    def put(self, record: MapRecord) -> None:
        """Stage a record write; idempotent for identical values."""
        if not record.attribute:
            raise StoreError("malformed key: empty attribute name")
        if record.segment < 0:
            raise StoreError("malformed key: negative segment id")
        if not isinstance(record.value, (int, bool)):
            raise StoreError(f"non-scalar value {record.value!r}")
        self._staged.setdefault(record.region, {})[record.key()] = record.value

    def delete(
        self, layer: BuildingBlock, region: int, segment: int, attribute: str
    ) -> None:
        """Stage a record removal."""
        self._staged.setdefault(region, {})[(layer, segment, attribute)] = _DELETED

    def commit(self, region: int) -> tuple[int, ChangePatch]:
        """Fold staged writes into a new version; returns (version, patch)."""
        staged = self._staged.get(region, {})
        committed = self._records.setdefault(region, {})
        ops: list[PatchOp] = []
        for key in sorted(staged, key=lambda k: (int(k[0]), k[1], k[2])):
            layer, segment, attribute = key
            val = staged[key]
            if val is _DELETED:
                if key in committed:
                    ops.append(PatchOp(_OP_DELETE, layer, segment, attribute))
            elif key not in committed or committed[key] != val:
                ops.append(PatchOp(_OP_SET, layer, segment, attribute, val))
        if not ops:
            raise NothingStagedError(f"no staged changes for region {region}")
        version = self.version(region)
        patch = ChangePatch(region, version, version + 1, tuple(ops))
        self._apply_ops(region, patch)
        self._staged.pop(region, None)
        return version + 1, patch

    def apply_patch(self, patch: ChangePatch) -> None:
        """Apply a change-only patch atomically; fails without side effects."""
        current = self.version(patch.region)
        if patch.from_version != current:
            raise VersionMismatchError(
                f"region {patch.region}: patch expects v{patch.from_version}, "
                f"store is at v{current}"
            )
        committed = self._records.setdefault(patch.region, {})
        for op in patch.ops:
            if op.op == _OP_DELETE and (op.layer, op.segment, op.attribute) not in committed:
                raise StoreError(
                    f"delete of missing record {(op.layer, op.segment, op.attribute)}"
                )
        self._apply_ops(patch.region, patch)

    def _apply_ops(self, region: int, patch: ChangePatch) -> None:
        committed = self._records.setdefault(region, {})
        for op in patch.ops:
            key = (op.layer, op.segment, op.attribute)
            if op.op == _OP_SET:
                committed[key] = op.value  # type: ignore[assignment]
                self._key_region[key] = region
            else:
                committed.pop(key, None)
                self._key_region.pop(key, None)
        self._versions[region] = patch.to_version
        self._history.setdefault(region, []).append(patch)

    def diff(self, region: int, v_old: int, v_new: int) -> list[ChangePatch]:
        """The stored patch chain covering (v_old, v_new]."""
        if v_old > v_new:
            raise StoreError(f"v_old {v_old} > v_new {v_new}")
        if v_new > self.version(region):
            raise StoreError(f"region {region} has no version {v_new}")
        if v_old == v_new:
            return []
        chain = [
            p for p in self._history.get(region, [])
            if v_old < p.to_version <= v_new
        ]
        if len(chain) != v_new - v_old:
            raise HistoryPrunedError(
                f"region {region}: history for ({v_old}, {v_new}] not retained"
            )
        return chain

    def prune_history(self, region: int, keep_last: int) -> None:
        """Drop all but the most recent keep_last patches of a region."""
        hist = self._history.get(region, [])
        if keep_last < len(hist):
            self._history[region] = hist[len(hist) - keep_last:]

    def restore_snapshot(self, snap: RegionSnapshot) -> None:
        """Replace a region wholesale (pruned-history fallback path).

        Local patch history for the region restarts at the snapshot version.
        """
        old = self._records.get(snap.region, {})
        for key in old:
            self._key_region.pop(key, None)
        self._records[snap.region] = dict(snap.records)
        for key in snap.records:
            self._key_region[key] = snap.region
        self._versions[snap.region] = snap.version
        self._history[snap.region] = []
        self._staged.pop(snap.region, None)

    def copy(self) -> "MapStore":
        """Independent copy of the committed state (staging not carried over)."""
        dup = MapStore()
        dup._records = {r: dict(recs) for r, recs in self._records.items()}
        dup._versions = dict(self._versions)
        dup._history = {r: list(h) for r, h in self._history.items()}
        dup._key_region = dict(self._key_region)
        return dup


# ---------------------------------------------------------------------------
# Canonical binary format ("MPS1", little-endian, length-prefixed records)
# ---------------------------------------------------------------------------


def encode_value(attribute: str, value: Scalar) -> bytes:
    tag = ATTRIBUTE_SCHEMA.get(attribute, (None, None))[1]
    if tag is None:
        tag = _TAG_BOOL if isinstance(value, bool) else _TAG_INT
    if tag == _TAG_BOOL:
        return struct.pack("<BB", tag, 1 if value else 0)
    if tag == _TAG_ENUM:
        return struct.pack("<BH", tag, int(value))
    return struct.pack("<Bq", tag, int(value))


def decode_value(data: bytes, pos: int) -> tuple[Scalar, int]:
    tag = data[pos]
    if tag == _TAG_BOOL:
        return bool(data[pos + 1]), pos + 2
    if tag == _TAG_ENUM:
        return struct.unpack_from("<H", data, pos + 1)[0], pos + 3
    if tag == _TAG_INT:
        return struct.unpack_from("<q", data, pos + 1)[0], pos + 9
    raise StoreError(f"bad value tag {tag:#x}")


def _encode_key(layer: BuildingBlock, segment: int, attribute: str) -> bytes:
    attr = attribute.encode("utf-8")
    return struct.pack("<BIB", int(layer), segment, len(attr)) + attr


def _decode_key(data: bytes, pos: int) -> tuple[BuildingBlock, int, str, int]:
    layer, segment, alen = struct.unpack_from("<BIB", data, pos)
    pos += 6
    attr = data[pos:pos + alen].decode("utf-8")
    return BuildingBlock(layer), segment, attr, pos + alen


def encode_snapshot(snap: RegionSnapshot) -> bytes:
    out = [
        _MAGIC,
        struct.pack("<BIII", _KIND_SNAPSHOT, snap.region, snap.version,
                    len(snap.records)),
    ]
    for key in sorted(snap.records, key=lambda k: (int(k[0]), k[1], k[2])):
        layer, segment, attribute = key
        body = _encode_key(layer, segment, attribute)
        body += encode_value(attribute, snap.records[key])
        out.append(struct.pack("<H", len(body)))
        out.append(body)
    return b"".join(out)


def decode_snapshot(data: bytes) -> RegionSnapshot:
    if data[:4] != _MAGIC or data[4] != _KIND_SNAPSHOT:
        raise StoreError("bad snapshot header")
    region, version, count = struct.unpack_from("<III", data, 5)
    pos = 17
    records: dict[RecordKey, Scalar] = {}
    for _ in range(count):
        (blen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        layer, segment, attr, vpos = _decode_key(data, pos)
        value, _ = decode_value(data, vpos)
        records[(layer, segment, attr)] = value
        pos += blen
    return RegionSnapshot(region=region, version=version, records=records)


def encode_patch(patch: ChangePatch) -> bytes:
    out = [
        _MAGIC,
        struct.pack("<BIIIH", _KIND_PATCH, patch.region, patch.from_version,
                    patch.to_version, len(patch.ops)),
    ]
    for op in patch.ops:
        body = bytes([op.op]) + _encode_key(op.layer, op.segment, op.attribute)
        if op.op == _OP_SET:
            body += encode_value(op.attribute, op.value)  # type: ignore[arg-type]
        out.append(struct.pack("<H", len(body)))
        out.append(body)
    return b"".join(out)


def decode_patch(data: bytes) -> ChangePatch:
    if data[:4] != _MAGIC or data[4] != _KIND_PATCH:
        raise StoreError("bad patch header")
    region, v_from, v_to, count = struct.unpack_from("<IIIH", data, 5)
    pos = 19
    ops: list[PatchOp] = []
    for _ in range(count):
        (blen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        op_tag = data[pos]
        layer, segment, attr, vpos = _decode_key(data, pos + 1)
        if op_tag == _OP_SET:
            value, _ = decode_value(data, vpos)
            ops.append(PatchOp(_OP_SET, layer, segment, attr, value))
        elif op_tag == _OP_DELETE:
            ops.append(PatchOp(_OP_DELETE, layer, segment, attr))
        else:
            raise StoreError(f"bad op tag {op_tag:#x}")
        pos += blen
    return ChangePatch(region, v_from, v_to, tuple(ops))


def encode_patch_list(patches: Iterable[ChangePatch]) -> bytes:
    bodies = [encode_patch(p) for p in patches]
    out = [_MAGIC, struct.pack("<BI", _KIND_PATCH_LIST, len(bodies))]
    for body in bodies:
        out.append(struct.pack("<I", len(body)))
        out.append(body)
    return b"".join(out)


def decode_patch_list(data: bytes) -> list[ChangePatch]:
    if data[:4] != _MAGIC or data[4] != _KIND_PATCH_LIST:
        raise StoreError("bad patch list header")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    patches = []
    for _ in range(count):
        (plen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        patches.append(decode_patch(data[pos:pos + plen]))
        pos += plen
    return patches


def serialized_size(obj: RegionSnapshot | ChangePatch | list[ChangePatch]) -> int:
    """Exact byte length of the canonical binary serialization."""
    if isinstance(obj, RegionSnapshot):
        return len(encode_snapshot(obj))
    if isinstance(obj, ChangePatch):
        return len(encode_patch(obj))
    return len(encode_patch_list(obj))


# ---------------------------------------------------------------------------
# Bootstrap from a road network
# ---------------------------------------------------------------------------


def assign_regions(net: RoadNetwork, n_regions: int) -> dict[int, int]:
    """Partition segments into n_regions balanced strips by midpoint x."""
    if n_regions < 1:
        raise StoreError("n_regions must be >= 1")
    mids = []
    for seg_id in sorted(net.segments):
        geom = net.segments[seg_id].geometry
        mx = (geom[0][0] + geom[-1][0]) / 2.0
        mids.append((mx, seg_id))
    mids.sort()
    per = max(1, -(-len(mids) // n_regions))
    return {
        seg_id: min(i // per, n_regions - 1)
        for i, (_, seg_id) in enumerate(mids)
    }


def build_master_store(
    net: RoadNetwork, n_regions: int = 1
) -> tuple[MapStore, dict[int, int]]:
    """Store seeded from ground truth, one committed version per region."""
    region_map = assign_regions(net, n_regions)
    store = MapStore()
    for seg_id in sorted(net.segments):
        seg = net.segments[seg_id]
        region = region_map[seg_id]
        values: dict[str, Scalar] = {
            "speed_limit": seg.speed_limit,
            "lane_count": seg.lane_count,
            "route_type": int(seg.route_type),
            "is_tunnel": seg.is_tunnel,
            "is_bridge": seg.is_bridge,
            "is_emergency_lane": seg.is_emergency_lane,
        }
        for attribute, value in values.items():
            layer = attribute_layer(attribute)
            store.put(MapRecord(layer, region, seg_id, attribute, value))
    for region in sorted(set(region_map.values())):
        store.commit(region)
    return store, region_map
