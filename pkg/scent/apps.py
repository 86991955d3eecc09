from django.apps import AppConfig


class ScentConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'scent'
    verbose_name = 'SCENT sequence-to-sequence conversion'
