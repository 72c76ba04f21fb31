"""Streamline tractography toolkit.

Streamline-level tractogram comparison with the epsilon-ball seeding metric,
and a recurrent (GRU) tracking network trained teacher-student on synthetic
vector-field phantoms.
"""

__version__ = "0.1.0"
