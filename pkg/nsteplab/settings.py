"""
Django settings for the nsteplab project.

Run parameters live in YAML profiles (see core/profiles/); this module only
carries project wiring: apps, database, Celery and logging.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(os.path.join(BASE_DIR, '.env'))

SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'nsteplab-local-only')

DEBUG = os.environ.get('DEBUG', 'False').lower() == 'true'

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',

    #Third-party apps
    'rest_framework',

    # Local apps
    'core',
]

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.environ.get('DB_NAME', os.path.join(BASE_DIR, 'nsteplab.sqlite3')),
    }
}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Experiment runner
NSTEP_PROFILE_DIR = os.environ.get('NSTEP_PROFILE_DIR', os.path.join(BASE_DIR, 'core', 'profiles'))
NSTEP_OUTPUT_DIR = os.environ.get('NSTEP_OUTPUT_DIR', os.path.join(BASE_DIR, 'runs'))
NSTEP_ARTIFACT_VERSION = os.environ.get('NSTEP_ARTIFACT_VERSION', '1.0.0')
NSTEP_DEFAULT_PROFILE = 'paper-like'

# Celery Configuration
CELERY_BROKER_URL = os.environ.get('REDIS_URL', 'redis://127.0.0.1:6379/0')
CELERY_RESULT_BACKEND = os.environ.get('REDIS_URL', 'redis://127.0.0.1:6379/0')
CELERY_ACCEPT_CONTENT = ['application/json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = 'UTC'
# Trials run in-process unless a worker pool is explicitly requested
CELERY_TASK_ALWAYS_EAGER = os.environ.get('CELERY_TASK_ALWAYS_EAGER', 'True').lower() == 'true'
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_TASK_ROUTES = {
    'core.tasks.run_pss_trial': {'queue': 'trials'},
    'core.tasks.run_lbms_batch': {'queue': 'trials'},
    'core.tasks.run_memcmp_candidate': {'queue': 'trials'},
    'core.tasks.run_subset_reduction': {'queue': 'reductions'},
}

LOGS_DIR = os.path.join(BASE_DIR, 'logs')
if not os.path.exists(LOGS_DIR):
    os.makedirs(LOGS_DIR)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': os.path.join(LOGS_DIR, 'nstep.log'),
            'formatter': 'verbose',
        },
        'console': {
            'level': os.environ.get('NSTEP_CONSOLE_LOG_LEVEL', 'WARNING'),
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['file', 'console'],
            'level': 'INFO',
            'propagate': True,
        },
        'core': {
            'handlers': ['file', 'console'],
            'level': os.environ.get('NSTEP_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
        'celery': {
            'handlers': ['file'],
            'level': 'INFO',
            'propagate': True,
        },
    },
}
