"""Two-stage online detection of action starts: a recurrent classifier, a
policy-gradient start localizer, late fusion, and point-level AP evaluation."""

__version__ = "0.1.0"
