from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Sweep the attack metric over the preprocessing resistance grid'
    subcommand = 'resist'
