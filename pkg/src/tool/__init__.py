from . import output_score_list
