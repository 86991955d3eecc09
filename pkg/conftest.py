import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'scent_project.settings')
django.setup()
