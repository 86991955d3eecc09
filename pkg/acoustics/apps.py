from django.apps import AppConfig


class AcousticsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'acoustics'
    verbose_name = 'Acoustic features and synthetic corpora'
