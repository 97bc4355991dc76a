class ExportError(Exception):
    """Checkpoint cannot be exported; the message names the offending
    checkpoint key or the validation step that rejected the output."""
