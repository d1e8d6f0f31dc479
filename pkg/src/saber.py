"""
ScaForge Saber KEM
~~~~~~~~~~~~~~~~~~
Saber (l = 3) key encapsulation with the round-3 byte layouts, built on the
striding Toom-Cook-4 multiplier with lazy interpolation.

Also holds the NIST AES-256-CTR known-answer DRBG and a reader/runner for
NIST-style .rsp files, so official vectors can be checked byte for byte.
"""

import hmac
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Union

import numpy as np
from Crypto.Cipher import AES
from Crypto.Hash import SHA3_256, SHA3_512, SHAKE128

from .core import RngStream
from .errors import CiphertextLengthError, KatFormatError
from .polymul import N, MemoryMeter, inner_prod_lazy, matvec_mul_lazy

logger = logging.getLogger(__name__)

RandomBytes = Callable[[int], bytes]


# ── Parameters ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SaberParams:
    name: str = "Saber"
    l: int = 3
    eq: int = 13
    ep: int = 10
    et: int = 4
    mu: int = 8
    seed_bytes: int = 32
    key_bytes: int = 32

    @property
    def q(self) -> int:
        return 1 << self.eq

    @property
    def p(self) -> int:
        return 1 << self.ep

    @property
    def h1(self) -> int:
        return 1 << (self.eq - self.ep - 1)

    @property
    def h2(self) -> int:
        return (1 << (self.ep - 2)) - (1 << (self.ep - self.et - 1)) + (1 << (self.eq - self.ep - 1))

    @property
    def poly_bytes(self) -> int:
        return self.eq * N // 8

    @property
    def polyvec_bytes(self) -> int:
        return self.l * self.poly_bytes

    @property
    def polyvec_compressed_bytes(self) -> int:
        return self.l * self.ep * N // 8

    @property
    def scale_bytes(self) -> int:
        return self.et * N // 8

    @property
    def coin_bytes(self) -> int:
        return self.mu * N // 8

    @property
    def indcpa_public_key_bytes(self) -> int:
        return self.polyvec_compressed_bytes + self.seed_bytes

    @property
    def indcpa_secret_key_bytes(self) -> int:
        return self.polyvec_bytes

    @property
    def public_key_bytes(self) -> int:
        return self.indcpa_public_key_bytes

    @property
    def secret_key_bytes(self) -> int:
        return self.indcpa_secret_key_bytes + self.indcpa_public_key_bytes + 32 + self.key_bytes

    @property
    def ciphertext_bytes(self) -> int:
        return self.polyvec_compressed_bytes + self.scale_bytes


SABER = SaberParams()


# ── Packing ────────────────────────────────────────────────────────────────

def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Little-endian bit packing of the low `bits` bits of every value."""
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    stream = (values[:, None] >> np.arange(bits)) & 1
    return np.packbits(stream.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    stream = stream[: count * bits].reshape(count, bits).astype(np.int64)
    return stream @ (1 << np.arange(bits, dtype=np.int64))


def pack_polyvec(vec: np.ndarray, bits: int) -> bytes:
    return b"".join(pack_bits(p, bits) for p in vec)


def unpack_polyvec(data: bytes, bits: int, l: int) -> np.ndarray:
    size = bits * N // 8
    return np.stack([unpack_bits(data[i * size:(i + 1) * size], bits, N) for i in range(l)])


# ── Hashing and Sampling ───────────────────────────────────────────────────

def sha3_256(data: bytes) -> bytes:
    return SHA3_256.new(data).digest()


def sha3_512(data: bytes) -> bytes:
    return SHA3_512.new(data).digest()


def shake128(data: bytes, length: int) -> bytes:
    return SHAKE128.new(data).read(length)


def cbd(buf: bytes, params: SaberParams = SABER) -> np.ndarray:
    """Centered binomial sample: popcount(low half) - popcount(high half) per coefficient."""
    half = params.mu // 2
    coins = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    coins = coins[: N * params.mu].reshape(N, params.mu).astype(np.int64)
    return coins[:, :half].sum(axis=1) - coins[:, half:].sum(axis=1)


def gen_matrix(seed_a: bytes, params: SaberParams = SABER) -> np.ndarray:
    """(l, l, 256) public matrix expanded from seed_A with SHAKE-128."""
    buf = shake128(seed_a, params.l * params.polyvec_bytes)
    return np.stack([
        unpack_polyvec(buf[i * params.polyvec_bytes:(i + 1) * params.polyvec_bytes], params.eq, params.l)
        for i in range(params.l)
    ])


def gen_secret(seed: bytes, params: SaberParams = SABER) -> np.ndarray:
    """(l, 256) secret vector, coefficients in [-mu/2, mu/2] stored mod q."""
    buf = shake128(seed, params.l * params.coin_bytes)
    return np.stack([
        cbd(buf[i * params.coin_bytes:(i + 1) * params.coin_bytes], params)
        for i in range(params.l)
    ]) & (params.q - 1)


def centered(poly: np.ndarray, modulus: int) -> np.ndarray:
    """Map residues to (-modulus/2, modulus/2]."""
    poly = np.asarray(poly, dtype=np.int64) % modulus
    return np.where(poly > modulus // 2, poly - modulus, poly)


# ── IND-CPA Scheme ─────────────────────────────────────────────────────────

def indcpa_keygen(
    randombytes: RandomBytes,
    params: SaberParams = SABER,
    meter: Optional[MemoryMeter] = None,
) -> tuple[bytes, bytes]:
    seed_a = shake128(randombytes(params.seed_bytes), params.seed_bytes)
    seed_s = randombytes(params.seed_bytes)
    a = gen_matrix(seed_a, params)
    s = gen_secret(seed_s, params)

    b = matvec_mul_lazy(a, s, meter, transpose=True)
    b = ((b + params.h1) & (params.q - 1)) >> (params.eq - params.ep)

    pk = pack_polyvec(b, params.ep) + seed_a
    sk = pack_polyvec(s, params.eq)
    return pk, sk


def indcpa_encrypt(
    message: bytes,
    seed_sp: bytes,
    pk: bytes,
    params: SaberParams = SABER,
    meter: Optional[MemoryMeter] = None,
) -> bytes:
    seed_a = pk[params.polyvec_compressed_bytes:]
    a = gen_matrix(seed_a, params)
    sp = gen_secret(seed_sp, params)

    bp = matvec_mul_lazy(a, sp, meter, transpose=False)
    bp = ((bp + params.h1) & (params.q - 1)) >> (params.eq - params.ep)
    ct = pack_polyvec(bp, params.ep)

    b = unpack_polyvec(pk[: params.polyvec_compressed_bytes], params.ep, params.l)
    vp = inner_prod_lazy(b, sp, meter)
    mp = unpack_bits(message, 1, N)
    vp = ((vp - (mp << (params.ep - 1)) + params.h1) & (params.p - 1)) >> (params.ep - params.et)
    return ct + pack_bits(vp, params.et)


def indcpa_decrypt(
    sk: bytes,
    ct: bytes,
    params: SaberParams = SABER,
    meter: Optional[MemoryMeter] = None,
) -> bytes:
    s = unpack_polyvec(sk[: params.indcpa_secret_key_bytes], params.eq, params.l)
    b = unpack_polyvec(ct[: params.polyvec_compressed_bytes], params.ep, params.l)
    v = inner_prod_lazy(b, s, meter)
    cm = unpack_bits(ct[params.polyvec_compressed_bytes:], params.et, N)
    v = ((v + params.h2 - (cm << (params.ep - params.et))) & (params.p - 1)) >> (params.ep - 1)
    return pack_bits(v, 1)


# ── CCA KEM ────────────────────────────────────────────────────────────────

@dataclass
class SaberKeyPair:
    public_key: bytes
    secret_key: bytes
    params: SaberParams = field(default=SABER, repr=False)

    @property
    def seed_a(self) -> bytes:
        return self.public_key[self.params.polyvec_compressed_bytes:]

    def public_vector(self) -> np.ndarray:
        """Rounded vector b, coefficients mod p."""
        p = self.params
        return unpack_polyvec(self.public_key[: p.polyvec_compressed_bytes], p.ep, p.l)

    def secret_vector(self) -> np.ndarray:
        """Secret s with centered coefficients."""
        p = self.params
        return centered(unpack_polyvec(self.secret_key[: p.indcpa_secret_key_bytes], p.eq, p.l), p.q)

    @property
    def public_key_hash(self) -> bytes:
        end = self.params.secret_key_bytes - self.params.key_bytes
        return self.secret_key[end - 32:end]

    @property
    def z(self) -> bytes:
        return self.secret_key[-self.params.key_bytes:]


def _check_length(name: str, data: bytes, expected: int) -> None:
    if len(data) != expected:
        raise CiphertextLengthError(f"{name} must be {expected} bytes, got {len(data)}")


def saber_keygen(
    randombytes: RandomBytes = os.urandom,
    params: SaberParams = SABER,
    meter: Optional[MemoryMeter] = None,
) -> SaberKeyPair:
    pk, sk_cpa = indcpa_keygen(randombytes, params, meter)
    sk = sk_cpa + pk + sha3_256(pk) + randombytes(params.key_bytes)
    return SaberKeyPair(public_key=pk, secret_key=sk, params=params)


def saber_encaps(
    pk: bytes,
    randombytes: RandomBytes = os.urandom,
    params: SaberParams = SABER,
    meter: Optional[MemoryMeter] = None,
) -> tuple[bytes, bytes]:
    """Returns (ciphertext, shared secret)."""
    _check_length("public key", pk, params.public_key_bytes)
    m = sha3_256(randombytes(32))
    kr = sha3_512(m + sha3_256(pk))
    ct = indcpa_encrypt(m, kr[32:], pk, params, meter)
    return ct, sha3_256(kr[:32] + sha3_256(ct))


def saber_decaps(
    sk: bytes,
    ct: bytes,
    params: SaberParams = SABER,
    meter: Optional[MemoryMeter] = None,
) -> bytes:
    """Shared secret; a re-encryption mismatch yields the pseudo-random rejection key."""
    _check_length("secret key", sk, params.secret_key_bytes)
    _check_length("ciphertext", ct, params.ciphertext_bytes)
    pk = sk[params.indcpa_secret_key_bytes: params.indcpa_secret_key_bytes + params.indcpa_public_key_bytes]
    pk_hash = sk[params.secret_key_bytes - 64: params.secret_key_bytes - 32]
    z = sk[params.secret_key_bytes - params.key_bytes:]

    m = indcpa_decrypt(sk, ct, params, meter)
    kr = sha3_512(m + pk_hash)
    expected = indcpa_encrypt(m, kr[32:], pk, params, meter)
    ok = hmac.compare_digest(ct, expected)
    prekey = kr[:32] if ok else z
    if not ok:
        logger.debug("decapsulation rejected ciphertext")
    return sha3_256(prekey + sha3_256(ct))


def stream_randombytes(rng: RngStream) -> RandomBytes:
    """Byte source drawn sequentially from one counter-based generator."""
    gen = rng.generator(0)
    return lambda n: gen.bytes(n)


# ── NIST KAT DRBG ──────────────────────────────────────────────────────────

class NistKatDrbg:
    """AES-256 CTR_DRBG as used by the NIST PQC known-answer generators."""

    def __init__(self, entropy: bytes, personalization: Optional[bytes] = None):
        if len(entropy) != 48:
            raise ValueError(f"entropy input must be 48 bytes, got {len(entropy)}")
        seed = bytearray(entropy)
        if personalization:
            for i, b in enumerate(personalization[:48]):
                seed[i] ^= b
        self.key = bytes(32)
        self.v = bytes(16)
        self._update(bytes(seed))
        self.reseed_counter = 1

    def _next_block(self, cipher) -> bytes:
        self.v = ((int.from_bytes(self.v, "big") + 1) % (1 << 128)).to_bytes(16, "big")
        return cipher.encrypt(self.v)

    def _update(self, provided: Optional[bytes]) -> None:
        cipher = AES.new(self.key, AES.MODE_ECB)
        temp = b"".join(self._next_block(cipher) for _ in range(3))
        if provided is not None:
            temp = bytes(a ^ b for a, b in zip(temp, provided))
        self.key, self.v = temp[:32], temp[32:]

    def random_bytes(self, n: int) -> bytes:
        cipher = AES.new(self.key, AES.MODE_ECB)
        out = b"".join(self._next_block(cipher) for _ in range(-(-n // 16)))[:n]
        self._update(None)
        self.reseed_counter += 1
        return out

    __call__ = random_bytes


# ── KAT Files ──────────────────────────────────────────────────────────────

KAT_FIELDS = ("count", "seed", "pk", "sk", "ct", "ss")


@dataclass
class KatVector:
    count: int
    seed: bytes
    pk: bytes
    sk: bytes
    ct: bytes
    ss: bytes


@dataclass
class KatOutcome:
    count: int
    passed: bool
    mismatched: list[str]


def read_kat(path: Union[str, Path]) -> Iterator[KatVector]:
    """Parse a NIST .rsp file; a record ends at its `ss` line."""
    record: dict = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if " = " not in line:
                raise KatFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split(" = ", 1)
            if key not in KAT_FIELDS:
                raise KatFormatError(f"{path}:{lineno}: unknown field {key!r}")
            try:
                record[key] = int(value) if key == "count" else bytes.fromhex(value)
            except ValueError:
                raise KatFormatError(f"{path}:{lineno}: bad value for {key}")
            if key == "ss":
                missing = [k for k in KAT_FIELDS if k not in record]
                if missing:
                    raise KatFormatError(f"{path}:{lineno}: record lacks {', '.join(missing)}")
                yield KatVector(**record)
                record = {}
    if record:
        raise KatFormatError(f"{path}: trailing record without 'ss'")


def write_kat(path: Union[str, Path], vectors: list[KatVector], params: SaberParams = SABER) -> None:
    lines = [f"# {params.name}", ""]
    for v in vectors:
        lines.append(f"count = {v.count}")
        for name in KAT_FIELDS[1:]:
            lines.append(f"{name} = {getattr(v, name).hex().upper()}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="ascii")


def kat_seeds(count: int) -> list[bytes]:
    """Per-record seeds as drawn by the NIST generator from entropy 00..2F."""
    master = NistKatDrbg(bytes(range(48)))
    return [master.random_bytes(48) for _ in range(count)]


def generate_kat_vector(count: int, seed: bytes, params: SaberParams = SABER) -> KatVector:
    drbg = NistKatDrbg(seed)
    keys = saber_keygen(drbg, params)
    ct, ss = saber_encaps(keys.public_key, drbg, params)
    return KatVector(count=count, seed=seed, pk=keys.public_key, sk=keys.secret_key, ct=ct, ss=ss)


def generate_kat(count: int, params: SaberParams = SABER) -> list[KatVector]:
    return [generate_kat_vector(i, seed, params) for i, seed in enumerate(kat_seeds(count))]


def check_kat_vector(vector: KatVector, params: SaberParams = SABER) -> KatOutcome:
    got = generate_kat_vector(vector.count, vector.seed, params)
    mismatched = [name for name in ("pk", "sk", "ct", "ss") if getattr(got, name) != getattr(vector, name)]
    if saber_decaps(vector.sk, vector.ct, params) != vector.ss:
        mismatched.append("decaps")
    return KatOutcome(count=vector.count, passed=not mismatched, mismatched=mismatched)
