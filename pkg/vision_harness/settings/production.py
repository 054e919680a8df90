"""
Production-specific Django settings for the vision_harness project.

Used by the Django-Q cluster and the admin when evaluation runs are
queued on a shared host.
"""

from .base import *

DEBUG = False

if not SECRET_KEY:
    raise ValueError("SECRET_KEY must be set in production environment via .env file")

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='', cast=Csv())

if not ALLOWED_HOSTS:
    raise ValueError("ALLOWED_HOSTS must be set in production environment via .env file")

SESSION_COOKIE_SECURE = True
CSRF_COOKIE_SECURE = True

# Production-specific logging (less verbose, focus on errors)
LOGGING['root']['level'] = 'WARNING'
LOGGING['loggers']['django']['level'] = 'WARNING'
LOGGING['loggers']['harness']['level'] = 'WARNING'
