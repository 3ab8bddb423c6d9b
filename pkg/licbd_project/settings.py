"""
Django settings for licbd_project project.

The project hosts the learned-image-compression backdoor toolkit as a single
Django app (licbd_app). Django provides the command-line surface (management
commands), the run registry (ORM) and the test runner; there is no web layer.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-licbd-local-experiments-only')

DEBUG = config('DEBUG', default=True, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'licbd_app',
]


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases

# Support both SQLite (default) and any DATABASE_URL for a shared run registry
DATABASE_URL = config('DATABASE_URL', default=None)

if DATABASE_URL:
    import dj_database_url
    DATABASES = {
        'default': dj_database_url.config(
            default=DATABASE_URL,
            conn_max_age=600,
            conn_health_checks=True,
        )
    }
else:
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.sqlite3',
            'NAME': BASE_DIR / 'db.sqlite3',
        }
    }


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# ==================== Experiment Settings ====================

# Torch device used when a command does not pass --device
LICBD_DEVICE = config('LICBD_DEVICE', default='cpu')

# Root under which run directories are created when --out is relative
LICBD_OUTPUT_ROOT = Path(config('LICBD_OUTPUT_ROOT', default=str(BASE_DIR / 'runs')))

# Seed used when neither the config file nor --seed sets one
LICBD_DEFAULT_SEED = config('LICBD_DEFAULT_SEED', default=0, cast=int)

# Desk-scale training checks take minutes; opt in explicitly
LICBD_RUN_SLOW_TESTS = config('LICBD_RUN_SLOW_TESTS', default=False, cast=bool)

# Default experiment file shipped with the repo
LICBD_DEFAULT_CONFIG = BASE_DIR / 'configs' / 'desk.yaml'


# ==================== Logging ====================

LICBD_LOG_LEVEL = config('LICBD_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'licbd_app': {
            'handlers': ['console'],
            'level': LICBD_LOG_LEVEL,
            'propagate': False,
        },
    },
}
