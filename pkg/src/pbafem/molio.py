"""Molecular input handling and the Born-ion analytic reference solution.

Covers three things: parsing PQR files into point-charge systems, the
physical parameters of the implicit-solvent model (dielectric constants
and ionic strength), and the closed-form Born ion potentials used as an
accuracy oracle throughout the test suite.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

# Conversion from raw charges (units of e) to the dimensionless scaled
# charges used by the solver, at T = 298.15 K.  Configurable; all the
# unit-free model problems use scale 1.
DEFAULT_CHARGE_SCALE = 7011.27

TWO_TERM = "two_term"
THREE_TERM = "three_term"


class PqrParseError(ValueError):
    """Raised for malformed PQR records; carries the offending line number."""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


@dataclass(frozen=True)
class ChargeSystem:
    """Point charges plus the dielectric/ionic parameters of the model.

    positions : (N, 3) float array, charge locations in Angstrom
    charges   : (N,) float array, dimensionless scaled charges z_i
    eps_m     : dielectric constant of the molecular region
    eps_s     : dielectric constant of the solvent region
    kappa2    : squared modified Debye-Huckel parameter; active only in
                the solvent region (it is zero inside the molecule)
    """

    positions: np.ndarray
    charges: np.ndarray
    eps_m: float = 2.0
    eps_s: float = 80.0
    kappa2: float = 0.0

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        q = np.atleast_1d(np.asarray(self.charges, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("positions must be an (N, 3) array")
        if q.shape[0] != pos.shape[0]:
            raise ValueError("positions and charges must have equal length")
        if pos.shape[0] == 0:
            raise ValueError("at least one charge is required")
        if not (self.eps_m > 0.0 and self.eps_s > 0.0):
            raise ValueError("dielectric constants must be positive")
        if self.kappa2 < 0.0:
            raise ValueError("kappa2 must be non-negative")
        pos = pos.copy()
        q = q.copy()
        pos.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "charges", q)

    @property
    def n_charges(self):
        return self.positions.shape[0]

    def to_dict(self):
        return {
            "positions": self.positions.tolist(),
            "charges": self.charges.tolist(),
            "eps_m": self.eps_m,
            "eps_s": self.eps_s,
            "kappa2": self.kappa2,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            positions=np.asarray(d["positions"], dtype=float),
            charges=np.asarray(d["charges"], dtype=float),
            eps_m=float(d["eps_m"]),
            eps_s=float(d["eps_s"]),
            kappa2=float(d["kappa2"]),
        )


@dataclass(frozen=True)
class PqrAtom:
    serial: int
    name: str
    residue: str
    chain: str
    res_seq: str
    position: tuple
    charge: float
    radius: float


def parse_pqr(source):
    """Parse PQR text into a list of :class:`PqrAtom`.

    ``source`` may be a string, bytes, or a readable text stream.  Records
    are whitespace-delimited; only ATOM/HETATM records are consumed, both
    the 10-field (no chain id) and 11-field layouts are accepted.  Raises
    :class:`PqrParseError` with the line number on malformed numeric
    fields, and when no atoms are found at all.
    """
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        stream = io.StringIO(source)
    else:
        stream = source

    atoms = []
    for lineno, raw in enumerate(stream, start=1):
        fields = raw.split()
        if not fields or fields[0] not in ("ATOM", "HETATM"):
            continue
        if len(fields) == 10:
            chain = ""
            serial, name, residue, res_seq = fields[1:5]
            numeric = fields[5:10]
        elif len(fields) == 11:
            serial, name, residue, chain, res_seq = fields[1:6]
            numeric = fields[6:11]
        else:
            raise PqrParseError(
                "line %d: expected 10 or 11 fields in %s record, got %d"
                % (lineno, fields[0], len(fields)),
                line_number=lineno,
            )
        try:
            x, y, z, charge, radius = (float(v) for v in numeric)
        except ValueError:
            raise PqrParseError(
                "line %d: non-numeric coordinate/charge/radius field" % lineno,
                line_number=lineno,
            ) from None
        try:
            serial = int(serial)
        except ValueError:
            serial = lineno
        atoms.append(
            PqrAtom(
                serial=serial,
                name=name,
                residue=residue,
                chain=chain,
                res_seq=res_seq,
                position=(x, y, z),
                charge=charge,
                radius=radius,
            )
        )
    if not atoms:
        raise PqrParseError("no ATOM/HETATM records found", line_number=None)
    return atoms


def charge_system_from_atoms(atoms, eps_m=2.0, eps_s=80.0, kappa2=0.0,
                             charge_scale=DEFAULT_CHARGE_SCALE):
    """Build a :class:`ChargeSystem` (and the radii list) from parsed atoms."""
    positions = np.array([a.position for a in atoms], dtype=float)
    charges = np.array([a.charge for a in atoms], dtype=float) * charge_scale
    radii = np.array([a.radius for a in atoms], dtype=float)
    cs = ChargeSystem(positions, charges, eps_m=eps_m, eps_s=eps_s, kappa2=kappa2)
    return cs, radii


@dataclass(frozen=True)
class BornIon:
    """A single ion of given radius and charge centered at the origin.

    The dielectric sphere of radius ``radius`` sits inside a spherical
    computational domain of radius ``domain_radius``.
    """

    radius: float = 1.0
    charge: float = 1.0
    eps_m: float = 2.0
    eps_s: float = 80.0
    domain_radius: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.radius < self.domain_radius:
            raise ValueError("need 0 < radius < domain_radius")
        if not (self.eps_m > 0.0 and self.eps_s > 0.0):
            raise ValueError("dielectric constants must be positive")

    def charge_system(self, kappa2=0.0):
        return ChargeSystem(
            positions=np.zeros((1, 3)),
            charges=np.array([self.charge]),
            eps_m=self.eps_m,
            eps_s=self.eps_s,
            kappa2=kappa2,
        )


def born_exact_full(b, r):
    """Full electrostatic potential of the Born ion at radial distance r.

    Inside the sphere:  q/(eps_m r) + (q/a)(1/eps_s - 1/eps_m)
    Outside:            q/(eps_s r)
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise ValueError("radial distance must be positive")
    a, q = b.radius, b.charge
    inside = q / (b.eps_m * r) + (q / a) * (1.0 / b.eps_s - 1.0 / b.eps_m)
    outside = q / (b.eps_s * r)
    return np.where(r <= a, inside, outside)[()]


def born_singular(b, r):
    """Coulomb self-potential q/(eps_m r) of the Born charge."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise ValueError("radial distance must be positive")
    return (b.charge / (b.eps_m * r))[()]


def born_harmonic(b):
    """Harmonic extension of -u^s from the sphere surface: the constant -q/(eps_m a)."""
    return -b.charge / (b.eps_m * b.radius)


def born_exact_regular(b, r, scheme=THREE_TERM):
    """Regular (smooth) potential component of the Born ion.

    two_term:   full potential minus the Coulomb part, everywhere.
    three_term: equals the full potential in the solvent; inside the
                sphere the Coulomb part and its harmonic extension are
                both removed, leaving the constant q/(eps_s a).
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise ValueError("radial distance must be positive")
    a, q = b.radius, b.charge
    outside = q / (b.eps_s * r)
    if scheme == TWO_TERM:
        inside = (q / a) * (1.0 / b.eps_s - 1.0 / b.eps_m)
        out = (q / (b.eps_s * r)) * (1.0 - b.eps_s / b.eps_m)
        return np.where(r <= a, inside, out)[()]
    if scheme == THREE_TERM:
        inside = q / (b.eps_s * a)
        return np.where(r <= a, inside, outside)[()]
    raise ValueError("unknown scheme %r" % (scheme,))


def born_solvation_energy(b):
    """Closed-form Born solvation energy (q^2/2)(1/eps_s - 1/eps_m)/a."""
    return 0.5 * b.charge ** 2 * (1.0 / b.eps_s - 1.0 / b.eps_m) / b.radius
