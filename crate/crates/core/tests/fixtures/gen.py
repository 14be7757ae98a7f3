"""Hand-assembles the primary-log fixtures byte by byte.

Run with `python3 gen.py` from this directory. The encoder here is written
independently of the Rust code: CRC32C is computed bitwise and payloads are
laid out field by field (little-endian integers, u64 length prefixes for
strings and sequences, u32 variant indices for enums).
"""
import struct


def crc32c(data, crc=0):
    crc ^= 0xFFFFFFFF
    for b in data:
        crc ^= b
        for _ in range(8):
            crc = (crc >> 1) ^ (0x82F63B78 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def mix64(z):
    """splitmix64 finalizer; spreads node points that differ in one byte."""
    m = 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def u32(v):
    return struct.pack("<I", v)


def u64(v):
    return struct.pack("<Q", v)


def string(s):
    b = s.encode()
    return u64(len(b)) + b


def entry(term, cmd, payload):
    head = u64(term) + struct.pack("<H", cmd) + u32(len(payload))
    return head + u32(crc32c(head + payload)) + payload


def node_list(version, ids):
    out = u64(version) + u64(len(ids))
    for i in ids:
        out += u32(i) + string(f"sim://node-{i}") + u64(mix64(fnv1a64(f"node-{i}".encode())))
    return out


def dir_entry_add(dir_, name, child, kind, mtime):
    return u64(dir_) + string(name) + u64(child) + u32(kind) + u64(mtime)


def dir_entry_remove(dir_, name, mtime):
    return u64(dir_) + string(name) + u64(mtime)


two = entry(1, 15, node_list(1, [1])) + entry(1, 11, dir_entry_add(1, "data", 2, 1, 7))
mixed = (
    entry(1, 15, node_list(2, [1, 2]))
    + entry(1, 11, dir_entry_add(2, "a.txt", 3, 0, 10))
    + entry(1, 12, dir_entry_remove(2, "a.txt", 11))
)

with open("two_appends.wal", "wb") as f:
    f.write(two)
with open("three_entries.wal", "wb") as f:
    f.write(mixed)
print(len(two), len(mixed))
