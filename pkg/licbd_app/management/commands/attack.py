from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Stage 1: inject the configured backdoors into the encoder of the vanilla codec'
    subcommand = 'attack'
