"""
Base Django settings for the vision_harness project.

Shared settings used by both development and production environments.
Environment-specific settings are in development.py and production.py.
"""

from pathlib import Path
from decouple import config, Csv
import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='', cast=Csv())


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    # Third-party apps
    'django_q',  # Background evaluation runs
    # Project apps
    'harness',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'vision_harness.urls'

# Prompt and report templates live in harness/templates.
TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.debug',
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'vision_harness.wsgi.application'


# Database
# Uses DATABASE_URL env var if available, otherwise defaults to SQLite

DATABASES = {
    'default': dj_database_url.config(
        default=f'sqlite:///{BASE_DIR / "db.sqlite3"}',
        conn_max_age=600,
        conn_health_checks=True,
    )
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files (admin only)

STATIC_URL = 'static/'
STATIC_ROOT = BASE_DIR / 'staticfiles'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Harness configuration
# Every knob can be overridden per run by a --config JSON file and then by CLI flags.

VASA = {
    'VLM_ENDPOINT': config('VASA_VLM_ENDPOINT', default=''),
    'VLM_MODEL': config('VASA_VLM_MODEL', default=''),
    'VLM_API_KEY': config('VASA_VLM_API_KEY', default=''),
    'SEG_ENDPOINT': config('VASA_SEG_ENDPOINT', default=''),
    'MAX_ROUNDS': config('VASA_MAX_ROUNDS', default=20, cast=int),
    'STALL_WINDOW': config('VASA_STALL_WINDOW', default=3, cast=int),
    'STALL_MIN_DELTA': config('VASA_STALL_MIN_DELTA', default=0, cast=int),
    'FAILURE_LIMIT': config('VASA_FAILURE_LIMIT', default=3, cast=int),
    'CANDIDATE_CAP': config('VASA_CANDIDATE_CAP', default=8, cast=int),
    'OVERLAY_ALPHA': config('VASA_OVERLAY_ALPHA', default=0.45, cast=float),
    'OVERLAY_MODE': config('VASA_OVERLAY_MODE', default='per_candidate'),
    'MAX_IMAGE_SIDE': config('VASA_MAX_IMAGE_SIDE', default=1024, cast=int),
    'TRANSPORT_RETRIES': config('VASA_TRANSPORT_RETRIES', default=2, cast=int),
    'TRANSPORT_BACKOFF': config('VASA_TRANSPORT_BACKOFF', default=0.5, cast=float),
    'HTTP_TIMEOUT': config('VASA_HTTP_TIMEOUT', default=60.0, cast=float),
    'ITEM_TIMEOUT': config('VASA_ITEM_TIMEOUT', default=300.0, cast=float),  # live backends only
    'JOBS': config('VASA_JOBS', default=1, cast=int),
    'KEEP_SNAPSHOTS': config('VASA_KEEP_SNAPSHOTS', default=False, cast=bool),
    'LIVE_SMOKE': config('VASA_LIVE_SMOKE', default=False, cast=bool),
}

# Django-Q Configuration (Background Tasks)
Q_CLUSTER = {
    'name': 'vision_harness',
    'workers': 2,
    'recycle': 500,
    'timeout': 3600,  # a full benchmark can take a while
    'retry': 3700,
    'compress': True,
    'save_limit': 250,
    'queue_limit': 50,
    'cpu_affinity': 1,
    'label': 'Django Q',
    'redis': None,  # Use Django ORM instead of Redis
    'orm': 'default'  # Use default database for task queue
}

X_FRAME_OPTIONS = 'DENY'
SECURE_CONTENT_TYPE_NOSNIFF = True

# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'INFO',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
        'harness': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}
