"""
Development-specific Django settings for the vision_harness project.

Relaxed secrets, SQLite, and DEBUG-level harness logging.
"""

from .base import *

DEBUG = True

# Never use this key outside a developer machine.
SECRET_KEY = SECRET_KEY or 'django-insecure-vision-harness-development-only'

ALLOWED_HOSTS = ['localhost', '127.0.0.1']

LOGGING['loggers']['harness']['level'] = config('VASA_LOG_LEVEL', default='DEBUG')

for template_engine in TEMPLATES:
    template_engine['OPTIONS']['debug'] = True
