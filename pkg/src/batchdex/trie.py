"""Hashable Merkle-Patricia tries with fan-out 16.

Keys are fixed-length byte strings, walked as hex nibbles.  Every node stores
the number of leaves below it and the number of those that are marked
deleted, which drives cheap compaction and balanced work partitioning.
Hashes are cached per node and recomputed lazily, so a root hash costs work
proportional to the subtrees touched since the previous hash.

Node hash encoding (BLAKE2b, 32-byte digest)::

    empty trie  : H(0x00)
    leaf        : H(0x01 | u16 nibble_len | packed prefix | u32 value_len | value)
    branch      : H(0x02 | u16 nibble_len | packed prefix | u16 child_bitmap | child hashes...)

``packed prefix`` is the prefix nibbles two per byte, high nibble first, with a
zero pad nibble when the length is odd.  Children are hashed in nibble order;
bit ``i`` of the bitmap is set when child ``i`` is present.  The prefix of a
node is the path segment from its parent's branching point, including the
branching nibble itself; the root's prefix is the common prefix of all keys.
"""

from __future__ import annotations

import hashlib
import heapq
import threading
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

from .errors import AlreadyDeleted, DuplicateKey, NotFound

HASH_LEN = 32


def blake(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=HASH_LEN).digest()


EMPTY_HASH = blake(b"\x00")


def _pack(prefix: str) -> bytes:
    if len(prefix) % 2:
        prefix += "0"
    return bytes.fromhex(prefix)


def _common(a: str, b: str) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


class _Node:
    __slots__ = ("prefix", "children", "value", "hash", "leaf_count", "deleted_count", "deleted")

    def __init__(self, prefix: str, children: dict[str, _Node] | None = None, value: bytes | None = None):
        self.prefix = prefix
        self.children = children
        self.value = value
        self.hash: bytes | None = None
        self.leaf_count = 1 if children is None else 0
        self.deleted_count = 0
        self.deleted = False

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def recount(self) -> None:
        self.leaf_count = sum(c.leaf_count for c in self.children.values())
        self.deleted_count = sum(c.deleted_count for c in self.children.values())


def _clone(n: _Node) -> _Node:
    c = _Node.__new__(_Node)
    c.prefix = n.prefix
    c.value = n.value
    c.hash = n.hash
    c.leaf_count = n.leaf_count
    c.deleted_count = n.deleted_count
    c.deleted = n.deleted
    c.children = None if n.children is None else {k: _clone(v) for k, v in n.children.items()}
    return c


@dataclass(frozen=True)
class KeyRange:
    """Half-open key range ``[start, end)``; ``None`` bounds are unbounded."""

    start: bytes | None
    end: bytes | None
    size: int

    def __contains__(self, key: bytes) -> bool:
        return (self.start is None or key >= self.start) and (self.end is None or key < self.end)


class Trie:
    """Persistent trie used for orderbooks and account commitments."""

    def __init__(self, key_len: int) -> None:
        self.key_len = key_len
        self.root: _Node | None = None
        self._lock = threading.Lock()

    def __getstate__(self) -> dict:
        return {"key_len": self.key_len, "root": self.root}

    def __setstate__(self, st: dict) -> None:
        self.key_len = st["key_len"]
        self.root = st["root"]
        self._lock = threading.Lock()

    def copy(self) -> Trie:
        """Independent trie with the same nodes, cached hashes and counters."""
        t = Trie(self.key_len)
        t.root = None if self.root is None else _clone(self.root)
        return t

    # --- basic properties -------------------------------------------------

    def __len__(self) -> int:
        return 0 if self.root is None else self.root.leaf_count - self.root.deleted_count

    @property
    def leaf_count(self) -> int:
        return 0 if self.root is None else self.root.leaf_count

    @property
    def deleted_count(self) -> int:
        return 0 if self.root is None else self.root.deleted_count

    def _path(self, key: bytes) -> str:
        if len(key) != self.key_len:
            raise ValueError(f"key length {len(key)} != {self.key_len}")
        return key.hex()

    # --- insertion --------------------------------------------------------

    def insert(self, key: bytes, value: bytes) -> None:
        """Insert a new key; re-inserting an identical pair is a no-op."""
        self.root, _ = self._insert(self.root, self._path(key), value, overwrite=False)

    def put(self, key: bytes, value: bytes) -> None:
        """Insert or overwrite."""
        self.root, _ = self._insert(self.root, self._path(key), value, overwrite=True)

    def _insert(self, node: _Node | None, path: str, value: bytes, overwrite: bool) -> tuple[_Node, tuple[int, int]]:
        if node is None:
            return _Node(path, value=value), (1, 0)
        prefix = node.prefix
        common = _common(prefix, path)
        if common < len(prefix):
            branch = _Node(prefix[:common], children={})
            node.prefix = prefix[common:]
            node.hash = None
            leaf = _Node(path[common:], value=value)
            branch.children[node.prefix[0]] = node
            branch.children[leaf.prefix[0]] = leaf
            branch.leaf_count = node.leaf_count + 1
            branch.deleted_count = node.deleted_count
            return branch, (1, 0)
        if node.children is None:
            if node.deleted:
                # revive a marked leaf that has not been compacted yet
                node.deleted = False
                node.deleted_count = 0
                node.value = value
                node.hash = None
                return node, (0, -1)
            if node.value != value:
                if not overwrite:
                    raise DuplicateKey(bytes.fromhex(path if len(path) % 2 == 0 else path + "0"))
                node.value = value
                node.hash = None
            return node, (0, 0)
        rest = path[common:]
        child = node.children.get(rest[0])
        if child is None:
            node.children[rest[0]] = _Node(rest, value=value)
            delta = (1, 0)
        else:
            node.children[rest[0]], delta = self._insert(child, rest, value, overwrite)
        node.leaf_count += delta[0]
        node.deleted_count += delta[1]
        node.hash = None
        return node, delta

    # --- lookup -----------------------------------------------------------

    def _find(self, path: str) -> list[_Node]:
        trail = []
        node = self.root
        while node is not None:
            if not path.startswith(node.prefix):
                break
            trail.append(node)
            path = path[len(node.prefix):]
            if node.children is None:
                if not path:
                    return trail
                break
            node = node.children.get(path[0]) if path else None
        raise NotFound

    def get(self, key: bytes) -> bytes:
        try:
            leaf = self._find(self._path(key))[-1]
        except NotFound:
            raise NotFound(key) from None
        if leaf.deleted:
            raise NotFound(key)
        return leaf.value

    def __contains__(self, key: bytes) -> bool:
        try:
            self.get(key)
        except NotFound:
            return False
        return True

    def update(self, key: bytes, value: bytes) -> None:
        """Overwrite the value of a live key."""
        try:
            trail = self._find(self._path(key))
        except NotFound:
            raise NotFound(key) from None
        if trail[-1].deleted:
            raise NotFound(key)
        trail[-1].value = value
        for n in trail:
            n.hash = None

    # --- deletion ---------------------------------------------------------

    def mark_delete(self, key: bytes) -> None:
        """Flag a leaf as deleted; it stays physically present until :meth:`compact`."""
        try:
            trail = self._find(self._path(key))
        except NotFound:
            raise NotFound(key) from None
        with self._lock:
            leaf = trail[-1]
            if leaf.deleted:
                raise AlreadyDeleted(key)
            leaf.deleted = True
            for n in trail:
                n.deleted_count += 1

    def is_marked(self, key: bytes) -> bool:
        try:
            return self._find(self._path(key))[-1].deleted
        except NotFound:
            return False

    def compact(self) -> None:
        """Physically remove marked leaves and collapse unary branches."""
        if self.root is not None and self.root.deleted_count:
            self.root = self._compact(self.root)

    def _compact(self, node: _Node) -> _Node | None:
        if node.children is None:
            return None if node.deleted else node
        if not node.deleted_count:
            return node
        for c in list(node.children):
            new = self._compact(node.children[c])
            if new is None:
                del node.children[c]
            else:
                node.children[c] = new
        return self._normalise(node)

    @staticmethod
    def _normalise(node: _Node) -> _Node | None:
        if not node.children:
            return None
        if len(node.children) == 1:
            (child,) = node.children.values()
            child.prefix = node.prefix + child.prefix
            child.hash = None
            return child
        node.recount()
        node.hash = None
        return node

    def delete(self, key: bytes) -> None:
        """Physically remove one live key."""
        self.get(key)
        self.mark_delete(key)
        self.root = self._delete_path(self.root, self._path(key))

    def _delete_path(self, node: _Node, path: str) -> _Node | None:
        if node.children is None:
            return None
        rest = path[len(node.prefix):]
        c = rest[0]
        new = self._delete_path(node.children[c], rest)
        if new is None:
            del node.children[c]
        else:
            node.children[c] = new
        return self._normalise(node)

    def remove_below(self, bound: bytes, inclusive: bool) -> int:
        """Drop every leaf with key ``< bound`` (``<=`` if inclusive); returns the live count removed.

        Executed offers always form such a dense range, so whole subtries are
        cut without visiting their leaves.
        """
        if self.root is None:
            return 0
        before = len(self)
        self.root = self._prune(self.root, self._path(bound), inclusive)
        return before - len(self)

    def _prune(self, node: _Node, bound: str, inclusive: bool) -> _Node | None:
        prefix = node.prefix
        part = bound[: len(prefix)]
        if prefix < part:
            return None
        if prefix > part:
            return node
        if node.children is None:
            return None if inclusive else node
        rest = bound[len(prefix):]
        c0 = rest[0]
        for c in list(node.children):
            if c < c0:
                del node.children[c]
            elif c == c0:
                new = self._prune(node.children[c], rest, inclusive)
                if new is None:
                    del node.children[c]
                else:
                    node.children[c] = new
        return self._normalise(node)

    # --- iteration --------------------------------------------------------

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        """Live ``(key, value)`` pairs in ascending key order."""
        if self.root is None:
            return
        stack = [(self.root, "")]
        while stack:
            node, path = stack.pop()
            path = path + node.prefix
            if node.children is None:
                if not node.deleted:
                    yield bytes.fromhex(path), node.value
                continue
            for c in sorted(node.children, reverse=True):
                stack.append((node.children[c], path))

    def keys(self) -> Iterator[bytes]:
        for k, _ in self.items():
            yield k

    def iter_range(self, r: KeyRange) -> Iterator[tuple[bytes, bytes]]:
        for k, v in self.items():
            if r.end is not None and k >= r.end:
                return
            if r.start is None or k >= r.start:
                yield k, v

    def kth_key(self, k: int) -> bytes:
        """The ``k``-th live key (0-based) in key order, found via subtree counts."""
        if not 0 <= k < len(self):
            raise IndexError(k)
        node = self.root
        path = ""
        while True:
            path += node.prefix
            if node.children is None:
                return bytes.fromhex(path)
            for c in sorted(node.children):
                child = node.children[c]
                live = child.leaf_count - child.deleted_count
                if k < live:
                    node = child
                    break
                k -= live

    def partition_work(self, shards: int) -> list[KeyRange]:
        """Split the live key space into at most ``shards`` contiguous, balanced ranges."""
        if shards < 1:
            raise ValueError("shards must be >= 1")
        n = len(self)
        shards = min(shards, max(n, 1))
        if shards == 1:
            return [KeyRange(None, None, n)]
        cuts = [i * n // shards for i in range(shards + 1)]
        bounds = [None] + [self.kth_key(c) for c in cuts[1:-1]] + [None]
        return [KeyRange(bounds[i], bounds[i + 1], cuts[i + 1] - cuts[i]) for i in range(shards)]

    # --- hashing ----------------------------------------------------------

    def root_hash(self) -> bytes:
        """BLAKE2b-256 commitment to the live key/value set (pending deletions are applied first)."""
        self.compact()
        if self.root is None:
            return EMPTY_HASH
        return self._hash(self.root)

    def _hash(self, node: _Node) -> bytes:
        if node.hash is not None:
            return node.hash
        head = len(node.prefix).to_bytes(2, "big") + _pack(node.prefix)
        if node.children is None:
            data = b"\x01" + head + len(node.value).to_bytes(4, "big") + node.value
        else:
            bitmap = 0
            hashes = []
            for c in sorted(node.children):
                bitmap |= 1 << int(c, 16)
                hashes.append(self._hash(node.children[c]))
            data = b"\x02" + head + bitmap.to_bytes(2, "big") + b"".join(hashes)
        node.hash = blake(data)
        return node.hash

    # --- audit ------------------------------------------------------------

    def validate(self) -> None:
        """Full-walk check of structural invariants and subtree counters."""
        if self.root is None:
            return

        def walk(node: _Node, depth: int, is_root: bool) -> tuple[int, int]:
            depth += len(node.prefix)
            if not is_root:
                assert node.prefix, "non-root node with empty prefix"
            if node.children is None:
                assert depth == 2 * self.key_len, "leaf at wrong depth"
                d = 1 if node.deleted else 0
                assert node.leaf_count == 1 and node.deleted_count == d
                return 1, d
            assert len(node.children) >= 2, "unary branch"
            leaves = dels = 0
            for c, child in node.children.items():
                assert child.prefix[0] == c
                a, b = walk(child, depth, False)
                leaves += a
                dels += b
            assert node.leaf_count == leaves, "leaf_count mismatch"
            assert node.deleted_count == dels, "deleted_count mismatch"
            return leaves, dels

        walk(self.root, 0, True)


class EphemeralTrie:
    """Per-worker, per-block insertion log backed by a bump-allocated arena.

    A branch node reserves 16 contiguous arena slots for its children, so it
    only needs a base index and a bitmap.  Slack slots are simply wasted.
    :meth:`reset` rewinds the allocator; the arena keeps twice the previous
    block's high-water mark.
    """

    _BLOCK = 16

    def __init__(self, key_len: int, capacity: int = 64) -> None:
        self.key_len = key_len
        self.arena: list[list | None] = [None] * max(capacity, 1)
        self.top = 1  # slot 0 is the root
        self.count = 0

    def __len__(self) -> int:
        return self.count

    @property
    def leaf_count(self) -> int:
        return self.count

    def _alloc(self) -> int:
        base = self.top
        self.top += self._BLOCK
        if self.top > len(self.arena):
            self.arena.extend([None] * max(len(self.arena), self._BLOCK))
        return base

    def insert_local(self, key: bytes, value: bytes) -> None:
        if len(key) != self.key_len:
            raise ValueError(f"key length {len(key)} != {self.key_len}")
        arena = self.arena
        path = key.hex()
        idx = 0
        while True:
            node = arena[idx]
            if node is None:
                arena[idx] = [path, -1, 0, value]
                self.count += 1
                return
            prefix, base, bitmap, old_value = node
            common = _common(prefix, path)
            if common < len(prefix):
                nb = self._alloc()
                arena = self.arena
                moved = [prefix[common:], base, bitmap, old_value]
                leaf = [path[common:], -1, 0, value]
                i_old = int(moved[0][0], 16)
                i_new = int(leaf[0][0], 16)
                arena[nb + i_old] = moved
                arena[nb + i_new] = leaf
                arena[idx] = [prefix[:common], nb, (1 << i_old) | (1 << i_new), None]
                self.count += 1
                return
            if base == -1:
                if old_value != value:
                    raise DuplicateKey(key)
                return
            path = path[common:]
            c = int(path[0], 16)
            node[2] = bitmap | (1 << c)
            idx = base + c

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        if self.arena[0] is None:
            return
        stack = [(0, "")]
        while stack:
            idx, path = stack.pop()
            prefix, base, bitmap, value = self.arena[idx]
            path += prefix
            if base == -1:
                yield bytes.fromhex(path), value
                continue
            for c in range(15, -1, -1):
                if bitmap >> c & 1:
                    stack.append((base + c, path))

    def reset(self) -> None:
        used = self.top
        self.arena = [None] * max(2 * used, self._BLOCK + 1)
        self.top = 1
        self.count = 0


def batch_merge(target: Trie, locals_: Iterable[EphemeralTrie]) -> int:
    """Merge ephemeral tries into ``target``; the result is independent of merge order.

    Keys must be unique across all locals and absent from the target.
    Returns the number of keys merged.
    """
    streams = [t.items() for t in locals_ if len(t)]
    prev = None
    n = 0
    for key, value in heapq.merge(*streams, key=lambda kv: kv[0]):
        if key == prev:
            raise DuplicateKey(key)
        if key in target:
            raise DuplicateKey(key)
        target.insert(key, value)
        prev = key
        n += 1
    return n
