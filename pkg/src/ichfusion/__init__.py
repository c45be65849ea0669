"""Two-stage slice-level intracranial hemorrhage classification on CT volumes."""

__version__ = "0.1.0"
