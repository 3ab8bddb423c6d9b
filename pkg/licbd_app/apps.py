from django.apps import AppConfig


class LicbdAppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'licbd_app'
    verbose_name = 'Learned image compression backdoor toolkit'
