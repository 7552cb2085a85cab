"""Affine element geometry and Piola push-forwards.

Transforms used for conforming families on affine tets:

* H(curl), covariant:      v = B^{-T} vhat,      curl v = B curlhat / det B
* H(div), contravariant:   v = B vhat / det B,   div v = divhat / det B
* H1 scalar:               v = vhat,             grad v = B^{-T} gradhat
"""

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateElementError

DEGENERACY_REL_TOL = 1e-12


@dataclass(frozen=True)
class GeomMap:
    """Affine map x = B xhat + b from the reference tet to a physical tet."""

    B: np.ndarray
    b: np.ndarray
    Binv: np.ndarray
    det: float

    @classmethod
    def from_vertices(cls, verts):
        verts = np.asarray(verts, dtype=float)
        B = (verts[1:] - verts[0]).T
        det = float(np.linalg.det(B))
        h = np.max(np.linalg.norm(verts[:, None, :] - verts[None, :, :], axis=2))
        if abs(det) <= 6.0 * DEGENERACY_REL_TOL * h**3:
            raise DegenerateElementError(
                f"tet volume {abs(det) / 6.0:.3e} below degeneracy threshold"
            )
        return cls(B=B, b=verts[0].copy(), Binv=np.linalg.inv(B), det=det)

    @property
    def volume(self):
        return abs(self.det) / 6.0

    def to_physical(self, ref_pts):
        return np.asarray(ref_pts) @ self.B.T + self.b

    def to_reference(self, phys_pts):
        return (np.asarray(phys_pts) - self.b) @ self.Binv.T


def push_forward(gmap, family, ref):
    """Push reference tables through the map appropriate for the family.

    ``ref`` is a dict with keys among values/curls/divs/gradients holding
    arrays shaped (n, npts, 3) for vectors and (n, npts) for scalars; the
    returned dict holds the physical quantities under the same keys.
    """
    out = {}
    if family == "N":
        out["values"] = np.einsum("dc,npc->npd", gmap.Binv.T, ref["values"])
        if "curls" in ref:
            out["curls"] = np.einsum("dc,npc->npd", gmap.B, ref["curls"]) / gmap.det
    elif family == "RT":
        out["values"] = np.einsum("dc,npc->npd", gmap.B, ref["values"]) / gmap.det
        if "divs" in ref:
            out["divs"] = ref["divs"] / gmap.det
    elif family in ("S", "P"):
        out["values"] = ref["values"]
        if "gradients" in ref:
            out["gradients"] = np.einsum(
                "dc,npc->npd", gmap.Binv.T, ref["gradients"]
            )
    else:
        raise ValueError(f"unknown family {family!r}")
    return out
