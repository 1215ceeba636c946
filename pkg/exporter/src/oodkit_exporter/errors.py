class ExportError(Exception):
    """Raised when an export cannot produce a valid bundle.

    Covers spec problems (bad tap declarations, duplicate image ids),
    runtime mismatches (a tap that never fires or produces a map whose
    shape contradicts its declared downsample factor), and annotation
    files whose schema cannot be recognised.
    """
