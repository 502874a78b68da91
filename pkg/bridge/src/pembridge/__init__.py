"""Offline encoder bridge producing PEMB v1 embedding files."""

from .encoders import ClipEncoder, EncoderError, HashEncoder, make_encoder
from .extract import ExtractionError, ExtractionJob, extract_images, extract_prompts
from .pemb import Record, make_record, write_pemb

__version__ = "0.1.0"
