"""
Settings package for the vision_harness project.

To use a specific settings file, set the DJANGO_SETTINGS_MODULE environment variable:
- Development: DJANGO_SETTINGS_MODULE=vision_harness.settings.development
- Production: DJANGO_SETTINGS_MODULE=vision_harness.settings.production

The default is development settings (configured in manage.py).
"""
