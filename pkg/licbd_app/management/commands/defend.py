from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Evaluate finetuning and pruning defenses against the stage 1 backdoor'
    subcommand = 'defend'
